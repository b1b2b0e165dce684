from __future__ import annotations

from dataclasses import dataclass

LATERAL = ("left", "straight", "right")
LONGITUDINAL = ("fast", "slow", "stop")
N_ACTIONS = 9


@dataclass(frozen=True)
class Action:
    """One of the 9 discrete driving commands; encoded as lateral * 3 + longitudinal."""

    lateral: str = "straight"
    longitudinal: str = "fast"

    def __post_init__(self):
        if self.lateral not in LATERAL or self.longitudinal not in LONGITUDINAL:
            raise ValueError(f"invalid action ({self.lateral}, {self.longitudinal})")

    @property
    def index(self) -> int:
        return LATERAL.index(self.lateral) * 3 + LONGITUDINAL.index(self.longitudinal)

    @classmethod
    def from_index(cls, k: int) -> "Action":
        if not 0 <= k < N_ACTIONS:
            raise ValueError(f"action index out of range: {k}")
        return cls(LATERAL[k // 3], LONGITUDINAL[k % 3])

    def __str__(self) -> str:
        return f"{self.lateral}/{self.longitudinal}"


ALL_ACTIONS = tuple(Action.from_index(k) for k in range(N_ACTIONS))
