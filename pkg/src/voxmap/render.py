import math
from typing import Sequence


def render_caret(text: str, position: int, message: str) -> str:
    # {text}
    #     ^ {message}
    position = max(0, min(position, len(text)))
    return f"{text}\n{' ' * position}^ {message}"


def format_uncertainty(mean: float, std: float, decimals: int = 2) -> str:
    """Render mean and standard deviation as value(uncertainty), e.g. 0.05(1)."""
    if math.isnan(mean):
        return "nan"
    uncertainty = 0 if math.isnan(std) else round(std * 10**decimals)
    return f"{mean:.{decimals}f}({uncertainty})"


def render_table(
    header: Sequence[str],
    rows: Sequence[Sequence[str]],
    column_delimiter: str = "  ",
) -> str:
    # first column left aligned, all others right aligned
    if len(header) == 0:
        return ""
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def render_row(cells: Sequence[str]) -> str:
        formatted = [
            f"{cell:<{widths[i]}}" if i == 0 else f"{cell:>{widths[i]}}"
            for i, cell in enumerate(cells)
        ]
        return column_delimiter.join(formatted).rstrip()

    return "\n".join(render_row(cells) for cells in [header, *rows])


def render_iou_table(
    class_names: Sequence[str], rows: Sequence[tuple[str, float, Sequence[float]]]
) -> str:
    """One row per method: name, mIoU and per-class IoU, all in percent with one decimal."""
    header = ["", "mIoU"] + list(class_names)
    body = [
        [name, f"{miou:.1f}"] + [f"{100.0 * iou:.1f}" for iou in per_class]
        for name, miou, per_class in rows
    ]
    return render_table(header, body)
