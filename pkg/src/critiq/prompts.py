"""Prompt bank: paired good/bad texts for zero-shot quality scoring and
per-style prompt ensembles for zero-shot style classification.

The default bank ships as a data file (`assets/prompt_bank.txt`); parsing and
serialization round-trip byte-exactly so the defaults can be diffed against
the shipped file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources


@dataclass
class PromptBank:
    iaa_pairs: list[tuple[str, str]] = field(default_factory=list)
    style_names: list[str] = field(default_factory=list)
    style_single: dict[str, str] = field(default_factory=dict)
    style_prompts: dict[str, list[str]] = field(default_factory=dict)

    def all_texts(self) -> list[str]:
        """Every distinct prompt text, in stable bank order."""
        seen: dict[str, None] = {}
        for g, b in self.iaa_pairs:
            seen.setdefault(g)
            seen.setdefault(b)
        for name in self.style_names:
            seen.setdefault(self.style_single[name])
            for p in self.style_prompts[name]:
                seen.setdefault(p)
        return list(seen)

    def serialize(self) -> str:
        lines = ["[iaa-pairs]"]
        for g, b in self.iaa_pairs:
            lines.append(f"{g}\t{b}")
        for name in self.style_names:
            lines.append("")
            lines.append(f"[style {name}]")
            lines.append(f"name: {self.style_single[name]}")
            lines.extend(self.style_prompts[name])
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        from .util import write_atomic
        write_atomic(path, self.serialize().encode("utf-8"))

    @classmethod
    def parse(cls, text: str) -> "PromptBank":
        bank = cls()
        section: str | None = None
        style: str | None = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("[") and line.endswith("]"):
                header = line[1:-1]
                if header == "iaa-pairs":
                    section, style = "iaa", None
                elif header.startswith("style "):
                    style = header[len("style "):]
                    section = "style"
                    bank.style_names.append(style)
                    bank.style_prompts[style] = []
                else:
                    raise ValueError(f"prompt bank line {lineno}: unknown section {header!r}")
                continue
            if section == "iaa":
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"prompt bank line {lineno}: expected two tab-separated texts")
                bank.iaa_pairs.append((parts[0], parts[1]))
            elif section == "style":
                if line.startswith("name: "):
                    bank.style_single[style] = line[len("name: "):]
                else:
                    bank.style_prompts[style].append(line)
            else:
                raise ValueError(f"prompt bank line {lineno}: content before any section header")
        for name in bank.style_names:
            if name not in bank.style_single:
                raise ValueError(f"prompt bank: style {name} has no 'name:' prompt")
            if not bank.style_prompts[name]:
                raise ValueError(f"prompt bank: style {name} has no ensemble prompts")
        return bank

    @classmethod
    def load(cls, path: str) -> "PromptBank":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read())

    @classmethod
    def default(cls) -> "PromptBank":
        return cls.parse(default_bank_bytes().decode("utf-8"))


def default_bank_bytes() -> bytes:
    return resources.files("critiq").joinpath("assets/prompt_bank.txt").read_bytes()
