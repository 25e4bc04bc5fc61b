"""Point estimate with a 95% interval, shared by the estimation and verdict layers."""

import math
from typing import Dict, NamedTuple, Optional


class Estimate(NamedTuple):
    est: float
    lo: Optional[float]
    hi: Optional[float]

    @property
    def complete(self) -> bool:
        return all(v is not None and not math.isnan(v) for v in (self.est, self.lo, self.hi))

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {'est': self.est, 'lo': self.lo, 'hi': self.hi}
