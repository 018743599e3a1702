import csv
import io
import math
from pathlib import Path
from typing import Annotated, Literal, Optional, Sequence, Union

from pydantic import BaseModel, Field, TypeAdapter

from voxmap.render import format_uncertainty, render_iou_table, render_table


class Timing(BaseModel):
    """Mean and sample standard deviation of per-frame durations, in seconds."""

    mean: float = 0.0
    std: float = 0.0

    @classmethod
    def from_samples(cls, samples: Sequence[float]) -> "Timing":
        if not samples:
            return cls()
        mean = math.fsum(samples) / len(samples)
        if len(samples) < 2:
            return cls(mean=mean)
        variance = math.fsum((s - mean) ** 2 for s in samples) / (len(samples) - 1)
        return cls(mean=mean, std=math.sqrt(variance))

    def render(self, decimals: int = 3) -> str:
        return format_uncertainty(self.mean, self.std, decimals)


class IouRow(BaseModel):
    name: str
    miou: float = Field(description="Mean IoU in percent.")
    per_class: list[float] = Field(description="Per-class IoU as fractions.")


class IouTable(BaseModel):
    classes: list[str]
    rows: list[IouRow] = Field(default_factory=list)

    def render(self) -> str:
        return render_iou_table(
            self.classes, [(row.name, row.miou, row.per_class) for row in self.rows]
        )


class FrameReport(BaseModel):
    kind: Literal["frame"] = "frame"
    label: str = ""
    index: int
    timestep: int
    points: int
    hits: int
    misses: int
    integrate: float
    publish: float
    query: float = 0.0
    delta_bytes: int
    nodes: int


class SummaryReport(BaseModel):
    kind: Literal["summary"] = "summary"
    label: str = ""
    resolution: float
    frames: int
    integrate: Timing = Field(default_factory=Timing)
    publish: Timing = Field(default_factory=Timing)
    query: Timing = Field(default_factory=Timing)
    memory_bytes: int = Field(description="Size of the serialized map.")
    memory_ratio: Optional[float] = Field(
        default=None, description="memory_bytes relative to the finest resolution of the run."
    )
    nodes: int
    unknown: int = 0
    free: int = 0
    occupied: int = 0
    delta_bytes: Timing = Field(default_factory=Timing)
    iou: Optional[IouTable] = None


ReportLine = Annotated[Union[FrameReport, SummaryReport], Field(discriminator="kind")]

_line_adapter: TypeAdapter[ReportLine] = TypeAdapter(ReportLine)

CSV_COLUMNS = [
    "label",
    "resolution",
    "frames",
    "integrate_mean",
    "integrate_std",
    "publish_mean",
    "publish_std",
    "query_mean",
    "query_std",
    "memory_bytes",
    "memory_ratio",
    "nodes",
    "unknown",
    "free",
    "occupied",
    "delta_bytes_mean",
    "miou",
]


class RunReport(BaseModel):
    frames: list[FrameReport] = Field(default_factory=list)
    summaries: list[SummaryReport] = Field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [line.model_dump_json() for line in [*self.frames, *self.summaries]]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str) -> "RunReport":
        report = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            parsed = _line_adapter.validate_json(line)
            if isinstance(parsed, FrameReport):
                report.frames.append(parsed)
            else:
                report.summaries.append(parsed)
        return report

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in self.summaries:
            miou = s.iou.rows[-1].miou if s.iou and s.iou.rows else ""
            writer.writerow(
                [
                    s.label,
                    repr(s.resolution),
                    s.frames,
                    repr(s.integrate.mean),
                    repr(s.integrate.std),
                    repr(s.publish.mean),
                    repr(s.publish.std),
                    repr(s.query.mean),
                    repr(s.query.std),
                    s.memory_bytes,
                    "" if s.memory_ratio is None else repr(s.memory_ratio),
                    s.nodes,
                    s.unknown,
                    s.free,
                    s.occupied,
                    repr(s.delta_bytes.mean),
                    miou,
                ]
            )
        return buffer.getvalue()

    def write(self, prefix: Union[str, Path]) -> tuple[Path, Path]:
        jsonl = Path(f"{prefix}.report.jsonl")
        table = Path(f"{prefix}.report.csv")
        jsonl.write_text(self.to_jsonl())
        table.write_text(self.to_csv())
        return jsonl, table

    def render(self) -> str:
        header = ["run", "frames", "integrate [s]", "publish [s]", "query [s]", "mem [B]", "ratio", "nodes"]
        rows = [
            [
                s.label or f"{s.resolution:g} m",
                str(s.frames),
                s.integrate.render(),
                s.publish.render(),
                s.query.render(),
                str(s.memory_bytes),
                "" if s.memory_ratio is None else f"{s.memory_ratio:.2f}",
                str(s.nodes),
            ]
            for s in self.summaries
        ]
        return render_table(header, rows)
