"""Reading and writing RTTM speaker annotations."""

from __future__ import annotations

import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, TextIO


@dataclass(frozen=True, order=True)
class Turn:
    onset: float
    offset: float
    speaker: str

    def __post_init__(self):
        if not self.speaker:
            raise ValueError("speaker id must be non-empty")
        if self.offset <= self.onset:
            raise ValueError(f"turn offset {self.offset} must exceed onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def parse_rttm(text: str) -> dict[str, list[Turn]]:
    """Parse RTTM text into ``{file_id: sorted turns}``. Non-SPEAKER lines are ignored."""
    sessions: dict[str, list[Turn]] = defaultdict(list)
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise ValueError(f"line {lineno}: expected at least 8 RTTM fields, got {len(fields)}")
        onset, dur = float(fields[3]), float(fields[4])
        if dur <= 0:
            continue
        sessions[fields[1]].append(Turn(onset, onset + dur, fields[7]))
    return {k: sorted(v) for k, v in sessions.items()}


def read_rttm(path: str | Path) -> dict[str, list[Turn]]:
    return parse_rttm(Path(path).read_text())


def write_rttm(dest: str | Path | TextIO, file_id: str, turns: Iterable[Turn]) -> None:
    lines = [
        f"SPEAKER {file_id} 1 {t.onset:.3f} {t.offset - t.onset:.3f} <NA> <NA> {t.speaker} <NA> <NA>\n"
        for t in sorted(turns)
    ]
    if isinstance(dest, (str, Path)):
        Path(dest).write_text("".join(lines))
    else:
        dest.writelines(lines)


def format_rttm(sessions: dict[str, list[Turn]]) -> str:
    buf = io.StringIO()
    for file_id in sorted(sessions):
        write_rttm(buf, file_id, sessions[file_id])
    return buf.getvalue()
