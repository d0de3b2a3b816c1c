"""Virtual time source for deterministic runs."""

from __future__ import annotations


class VirtualClock:
    """Simulated microsecond clock that only moves when told to.

    A frozen clock (``frozen=True``) never advances; concurrent mode uses one
    so that cost-model delays collapse to scheduling hops.
    """

    def __init__(self, start_us: float = 0.0, frozen: bool = False):
        self._now = float(start_us)
        self.frozen = frozen

    def now(self) -> float:
        return self._now

    def advance_to(self, t_us: float) -> float:
        if self.frozen:
            return self._now
        if t_us < self._now:
            raise ValueError(f"cannot move clock backwards ({t_us} < {self._now})")
        self._now = float(t_us)
        return self._now

    def advance_by(self, dt_us: float) -> float:
        if dt_us < 0:
            raise ValueError("negative time step")
        return self.advance_to(self._now + dt_us)

    def __repr__(self) -> str:
        return f"VirtualClock(now={self._now:.3f}us{', frozen' if self.frozen else ''})"
