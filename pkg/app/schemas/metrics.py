from typing import ClassVar, List, Optional

from pydantic import BaseModel


class StepMetrics(BaseModel):
    """Metrics of one optimisation step, one row of ``metrics.csv``."""

    COLUMNS: ClassVar[List[str]] = [
        "step", "lr", "loss", "recon", "reg", "grad_norm",
        "pooled_pair_cos", "gamma_t", "nan_flag",
    ]

    step: int
    lr: float
    loss: float
    recon: float
    reg: float
    grad_norm: float
    pooled_pair_cos: Optional[float] = None
    gamma_t: float
    nan_flag: bool = False

    def csv_row(self) -> List[str]:
        """Render the row with ``repr`` floats so traces compare exactly."""
        row = []
        for column in self.COLUMNS:
            value = getattr(self, column)
            if value is None:
                row.append("")
            elif isinstance(value, bool):
                row.append(str(int(value)))
            elif isinstance(value, float):
                row.append(repr(value))
            else:
                row.append(str(value))
        return row
