"""Radiology report sectioning and text extraction.

A header is any line that, after trimming, dropping one trailing colon, and
lowercasing, matches the known header set. Bodies run until the next header
or end of text. Text before the first header lands in the preamble. Parsing
is lossless: raw lines are preserved so the document reconstructs byte for
byte modulo trailing whitespace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

KNOWN_HEADERS = frozenset({
    "impression", "findings", "lung parenchyma", "airways", "pleura",
    "mediastinum", "heart", "bones", "upper abdomen", "technique",
    "comparison", "indication",
})
LUNG_HEADERS = ("lung parenchyma", "airways", "pleura")

TextMode = str  # "impression" | "lung_sections"


def normalize_header(line: str) -> str | None:
    """Normalized header name, or None when the line is not a header."""
    content = line.strip()
    if content.endswith(":"):
        content = content[:-1]
    name = content.strip().lower()
    return name if name in KNOWN_HEADERS else None


@dataclass(frozen=True)
class SectionEntry:
    name: str                   # normalized header
    header_line: str            # raw header line as found
    body_lines: tuple[str, ...]  # raw body lines, header excluded

    @property
    def body(self) -> str:
        return "\n".join(self.body_lines)


@dataclass(frozen=True)
class ReportSections:
    preamble_lines: tuple[str, ...] = ()
    entries: tuple[SectionEntry, ...] = field(default_factory=tuple)

    @property
    def preamble(self) -> str:
        return "\n".join(self.preamble_lines)

    @property
    def sections(self) -> dict[str, str]:
        """Normalized header -> cleaned body; duplicate headers aggregate in
        document order joined by single spaces."""
        out: dict[str, str] = {}
        for e in self.entries:
            clean = e.body.strip()
            if e.name in out and clean:
                out[e.name] = (out[e.name] + " " + clean).strip()
            elif e.name not in out:
                out[e.name] = clean
        return out

    def reconstruct(self) -> str:
        lines = list(self.preamble_lines)
        for e in self.entries:
            lines.append(e.header_line)
            lines.extend(e.body_lines)
        return "\n".join(lines)


def parse_report(text: str) -> ReportSections:
    """Total parser: any text yields a ReportSections."""
    lines = text.split("\n")
    # a trailing newline produces one empty trailing element; dropping it
    # keeps reconstruction within the trailing-whitespace allowance
    if lines and lines[-1] == "":
        lines = lines[:-1]
    preamble: list[str] = []
    entries: list[SectionEntry] = []
    name: str | None = None
    header_line = ""
    body: list[str] = []
    for line in lines:
        matched = normalize_header(line)
        if matched is not None:
            if name is not None:
                entries.append(SectionEntry(name, header_line, tuple(body)))
            name, header_line, body = matched, line, []
        elif name is None:
            preamble.append(line)
        else:
            body.append(line)
    if name is not None:
        entries.append(SectionEntry(name, header_line, tuple(body)))
    return ReportSections(preamble_lines=tuple(preamble), entries=tuple(entries))


@dataclass(frozen=True)
class ExtractedText:
    text: str
    missing: bool  # true when the requested content is absent or empty


def extract_text(sections: ReportSections, mode: TextMode) -> ExtractedText:
    """Pull the impression or the lung-specific sections for pairing."""
    if mode == "impression":
        wanted = ("impression",)
    elif mode == "lung_sections":
        wanted = LUNG_HEADERS
    else:
        raise ValueError(f"unknown text mode: {mode!r}")
    bodies = [e.body.strip() for e in sections.entries if e.name in wanted]
    text = " ".join(b for b in bodies if b)
    return ExtractedText(text=text, missing=not text)
