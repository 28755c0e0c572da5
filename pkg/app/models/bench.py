from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class BenchCheck(BaseModel):
    """One measured statistic against its theoretical bound."""

    name: str
    measured: float
    bound: float
    tol: float = 0.0
    passed: bool
    samples: int = 0
    detail: str = ""


class BenchReport(BaseModel):
    """Checks of one bench suite, plus raw series kept for audit."""

    suite: str
    checks: List[BenchCheck] = Field(default_factory=list)
    series: Dict[str, List[float]] = Field(default_factory=dict)
    constants: Dict[str, float] = Field(default_factory=dict)

    def add(
        self,
        name: str,
        measured: float,
        bound: float,
        tol: float = 0.0,
        samples: int = 0,
        detail: str = "",
        passed: Optional[bool] = None,
    ) -> BenchCheck:
        """Record a one-sided check; passes when measured <= bound * (1 + tol) unless `passed` is given."""
        if passed is None:
            passed = bool(measured <= bound * (1.0 + tol))
        check = BenchCheck(
            name=name,
            measured=float(measured),
            bound=float(bound),
            tol=tol,
            passed=bool(passed),
            samples=samples,
            detail=detail,
        )
        self.checks.append(check)
        return check

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[BenchCheck]:
        return [c for c in self.checks if not c.passed]
