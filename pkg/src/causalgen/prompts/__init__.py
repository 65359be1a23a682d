"""Prompt template loading and slot filling.

Templates live as plain-text files next to this module, one system + one user
file per stage. Slots are literal "{name}" tokens replaced verbatim, so JSON
braces inside the templates need no escaping.
"""

from __future__ import annotations

from importlib import resources


def load_template(name: str) -> str:
    """Read a template file (e.g. "extractor_user") shipped with the package."""
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render(template: str, slots: dict[str, str]) -> str:
    """Replace each literal "{name}" token with its value; no other escaping."""
    out = template
    for key, value in slots.items():
        out = out.replace("{" + key + "}", value)
    return out
