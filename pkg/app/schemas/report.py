from typing import Dict, List, Optional, Union

from pydantic import BaseModel

ReportValue = Union[int, float, str, None]


class EvalReport(BaseModel):
    """Machine-parseable outcome of one evaluation protocol."""

    protocol: str
    checkpoint: str
    step: int
    images: int
    values: Dict[str, ReportValue] = {}

    def lines(self) -> List[str]:
        """``key=value`` lines, fixed keys first; None renders as ``none``."""
        head = {"protocol": self.protocol, "checkpoint": self.checkpoint, "step": self.step, "images": self.images}
        return [f"{key}={_render(value)}" for key, value in {**head, **self.values}.items()]


class VersionInfo(BaseModel):
    name: str
    version: str


def _render(value: ReportValue) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
