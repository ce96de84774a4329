"""Shared renderers for prompt bindings (references, history, suggestions)."""

from __future__ import annotations

from typing import Sequence


def render_references(texts: Sequence[str]) -> str:
    """Fixed reference layout used in prompts and in emitted rag instructions."""
    return "\n\n".join(f"Reference [{i + 1}]:\n{text}" for i, text in enumerate(texts))


def render_history(turns: Sequence[tuple[str, str]]) -> str:
    """Render (question, answer) pairs; empty history renders as a marker."""
    if not turns:
        return "(no prior turns)"
    lines = []
    for i, (question, answer) in enumerate(turns):
        lines.append(f"Turn {i + 1}")
        lines.append(f"User: {question}")
        lines.append(f"Assistant: {answer}")
    return "\n".join(lines)


def render_suggestions(suggestions: Sequence[str]) -> str:
    if not suggestions:
        return "(none)"
    return "\n".join(f"{i + 1}. {s}" for i, s in enumerate(suggestions))
