from pydantic import BaseModel


class GradcheckResult(BaseModel):
    """Outcome of one finite-difference check."""

    name: str
    max_rel_err: float
    max_abs_err: float
    tolerance: float
    size: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{self.name} max_rel_err={self.max_rel_err:.3e} max_abs_err={self.max_abs_err:.3e} "
            f"tolerance={self.tolerance:.1e} {status}"
        )
