"""Plain-text ``key = value`` configuration files."""

from __future__ import annotations


def read_kv(path):
    """Read ``key = value`` lines; ``#`` starts a comment, blank lines skipped."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            out[key.strip()] = value.strip()
    return out


def write_kv(path, mapping):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(mapping):
            fh.write(f"{key} = {mapping[key]}\n")


def coerce(text, like):
    """Convert ``text`` to the type of the default value ``like``."""
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, (list, tuple)):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if like:
            return type(like)(coerce(p, like[0]) for p in parts)
        return type(like)(parts)
    return text
