"""Structured run reports: ``key: value`` sections plus aligned tables.

The ``records`` format carries the same keys as JSON objects, one per line.
"""
from __future__ import annotations

import json
import math
import sys


def fmt(value) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        if math.isnan(value):
            return "n/a"
        return f"{value:.6f}"
    if value is None:
        return "-"
    return str(value)


class Report:
    def __init__(self, command: str):
        self.command = command
        self.blocks = []  # ("section", title, [(k, v)]) | ("table", title, header, rows)

    def section(self, title, items):
        self.blocks.append(("section", title, list(items.items() if isinstance(items, dict) else items)))

    def table(self, title, header, rows):
        self.blocks.append(("table", title, list(header), [list(r) for r in rows]))

    def value(self, title, key):
        for block in self.blocks:
            if block[0] == "section" and block[1] == title:
                for k, v in block[2]:
                    if k == key:
                        return v
        raise KeyError(f"{title}.{key}")

    def render_text(self) -> str:
        out = [f"# segeval {self.command}"]
        for block in self.blocks:
            out.append("")
            out.append(f"[{block[1]}]")
            if block[0] == "section":
                width = max((len(k) for k, _ in block[2]), default=0)
                out.extend(f"{k.ljust(width)} : {fmt(v)}" for k, v in block[2])
            else:
                header, rows = block[2], [[fmt(c) for c in r] for r in block[3]]
                widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(header)]
                out.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
                out.extend("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)
        return "\n".join(out) + "\n"

    def render_records(self) -> str:
        lines = []
        for block in self.blocks:
            if block[0] == "section":
                for k, v in block[2]:
                    lines.append({"section": block[1], "key": k, "value": fmt(v)})
            else:
                for r in block[3]:
                    lines.append({"table": block[1], **{h: fmt(c) for h, c in zip(block[2], r)}})
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in lines)

    def render(self, style="text") -> str:
        return self.render_records() if style == "records" else self.render_text()

    def write(self, path=None, style="text"):
        text = self.render(style)
        if path is None or path == "-":
            sys.stdout.write(text)
        else:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return text
