"""Small fully-connected networks with hand-written reverse-mode gradients."""
import numpy as np

from rlpipe.errors import InvalidInputError, StateError


class Mlp:
    """Affine layers with ReLU between them and a linear output.

    Weights are stored as (fan_in, fan_out) so a batch ``X`` of shape
    (B, fan_in) maps through ``X @ W + b``.
    """

    def __init__(self, sizes, rng=None, final_scale=1.0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidInputError(f"bad layer sizes {sizes}")
        self.sizes = sizes
        self.weights = []
        self.biases = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if rng is None:
                W, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
            else:
                W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            if k == len(sizes) - 2:
                W *= final_scale
                b *= final_scale
            self.weights.append(W)
            self.biases.append(b)
        self._cache = None

    @property
    def params(self):
        """Flat list [W0, b0, W1, b1, ...]; the arrays are the live parameters."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def set_params(self, arrays):
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.weights):
            raise InvalidInputError(f"expected {2 * len(self.weights)} arrays, got {len(arrays)}")
        for k in range(len(self.weights)):
            W = np.asarray(arrays[2 * k], dtype=np.float64)
            b = np.asarray(arrays[2 * k + 1], dtype=np.float64)
            if W.shape != self.weights[k].shape or b.shape != self.biases[k].shape:
                raise InvalidInputError(
                    f"layer {k}: expected shapes {self.weights[k].shape}/{self.biases[k].shape}, "
                    f"got {W.shape}/{b.shape}")
            self.weights[k] = W.copy()
            self.biases[k] = b.copy()

    def copy(self):
        twin = Mlp.__new__(Mlp)
        twin.sizes = list(self.sizes)
        twin.weights = [W.copy() for W in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        twin._cache = None
        return twin

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise InvalidInputError(f"input width {x.shape[-1]} != network input size {self.sizes[0]}")
        return x

    def __call__(self, x):
        """Forward pass without recording activations."""
        h = self._check_input(x)
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if k < last:
                h = np.maximum(h, 0.0)
        return h

    def forward(self, x):
        """Forward pass that records what :meth:`backward` needs."""
        h = self._check_input(x)
        inputs = []
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ W + b
            if k < last:
                h = np.maximum(h, 0.0)
        self._cache = inputs
        return h

    def backward(self, grad_out, need_input_grad=False, need_param_grads=True):
        """Gradients of ``sum(grad_out * output)`` for the last recorded forward.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` follows the
        order of :attr:`params` (None when not requested) and ``input_grad`` is
        None unless requested.
        """
        if self._cache is None:
            raise StateError("backward called without a recorded forward pass")
        inputs = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = inputs[k]
            if need_param_grads and h_in.ndim == 1:
                grads[2 * k] = np.outer(h_in, g)
                grads[2 * k + 1] = g.copy()
            elif need_param_grads:
                grads[2 * k] = h_in.T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            if k > 0 or need_input_grad:
                g = g @ self.weights[k].T
                if k > 0:
                    # h_in is the post-ReLU activation of layer k-1
                    g = g * (h_in > 0)
        return (grads if need_param_grads else None), (g if need_input_grad else None)


class Adam:
    """Adaptive moment estimation over a fixed list of parameter arrays."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step_size = self.lr / c1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= step_size * m / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}

    def load_state_dict(self, d):
        if len(d["m"]) != len(self.m) or len(d["v"]) != len(self.v):
            raise InvalidInputError("optimizer state does not match parameter list")
        self.t = int(d["t"])
        for dst, src in zip(self.m + self.v, d["m"] + d["v"]):
            arr = np.asarray(src, dtype=np.float64)
            if arr.shape != dst.shape:
                raise InvalidInputError(f"optimizer moment shape {arr.shape} != {dst.shape}")
            dst[...] = arr
