"""Success-rate driven tightening of goal tolerances."""
import copy
import math
from collections import deque
from dataclasses import dataclass, field

from rlpipe.dynamics import FINAL_TOLERANCES, R_MAX, R_MIN, Tolerances
from rlpipe.errors import InvalidInputError

COVERAGE = 0.8


def initial_tolerances(region=(R_MIN, R_MAX), coverage=COVERAGE, mode="half-width"):
    """Starting tolerances that cover ``coverage`` of the training region.

    ``half-width`` (default) scales the region's half extent ``r_max``;
    ``area`` picks the radius whose disc covers that fraction of the square.
    The heading tolerance is ``coverage * pi`` in both modes.
    """
    r_min, r_max = region
    if not r_max > r_min:
        raise InvalidInputError(f"region must satisfy r_min < r_max, got {region}")
    if mode == "half-width":
        eps_p = coverage * r_max
    elif mode == "area":
        eps_p = math.sqrt(coverage * (r_max - r_min) ** 2 / math.pi)
    else:
        raise InvalidInputError(f"unknown coverage mode {mode!r}")
    return Tolerances(eps_p, coverage * math.pi)


def promotions_to_floor(start=None, floor=FINAL_TOLERANCES, shrink=0.8):
    """Number of shrink steps after which the position tolerance sits on its floor."""
    start = start or initial_tolerances()
    return math.ceil(math.log(floor.eps_p / start.eps_p) / math.log(shrink))


@dataclass
class CurriculumState:
    current: Tolerances = field(default_factory=initial_tolerances)
    floor: Tolerances = FINAL_TOLERANCES
    shrink_factor: float = 0.8
    promote_threshold: float = 0.95
    window_size: int = 100
    window: deque = None
    promotions: int = 0

    def __post_init__(self):
        self.current = Tolerances(*map(float, self.current))
        self.floor = Tolerances(*map(float, self.floor))
        if not 0 < self.shrink_factor < 1:
            raise InvalidInputError(f"shrink_factor must lie in (0, 1), got {self.shrink_factor}")
        if not 0 < self.promote_threshold <= 1:
            raise InvalidInputError(f"promote_threshold must lie in (0, 1], got {self.promote_threshold}")
        if self.window_size < 1:
            raise InvalidInputError("window_size must be positive")
        if min(self.floor) <= 0:
            raise InvalidInputError("floor tolerances must be positive")
        self.current = Tolerances(max(self.current[0], self.floor[0]), max(self.current[1], self.floor[1]))
        self.window = deque(self.window or (), maxlen=self.window_size)

    @property
    def at_floor(self):
        return self.current == self.floor

    def record(self, success):
        """Append one episode outcome; returns True when the tolerances shrank."""
        self.window.append(bool(success))
        if len(self.window) < self.window_size or self.at_floor:
            return False
        if sum(self.window) / self.window_size < self.promote_threshold:
            return False
        self.current = Tolerances(max(self.current.eps_p * self.shrink_factor, self.floor.eps_p),
                                  max(self.current.eps_theta * self.shrink_factor, self.floor.eps_theta))
        self.window.clear()
        self.promotions += 1
        return True

    def to_dict(self):
        return {
            "current": list(self.current),
            "floor": list(self.floor),
            "shrink_factor": self.shrink_factor,
            "promote_threshold": self.promote_threshold,
            "window_size": self.window_size,
            "window": [bool(v) for v in self.window],
            "promotions": self.promotions,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(Tolerances(*d["current"]), Tolerances(*d["floor"]), d["shrink_factor"],
                   d["promote_threshold"], d["window_size"], deque(d["window"]), d["promotions"])


def record_episode(state, success):
    """Functional form of :meth:`CurriculumState.record`; ``state`` is left untouched."""
    nxt = copy.deepcopy(state)
    nxt.record(success)
    return nxt
