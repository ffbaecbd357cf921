"""
RFC 8785 JSON Canonicalization Scheme (JCS) for dataset metadata.

Every JSON file the pipeline writes goes through `canonicalize`, so two runs with
the same inputs produce byte-identical metadata and stable content digests.
"""
import hashlib
import json
import unicodedata
from decimal import Decimal
from pathlib import Path
from typing import Any, Dict, Iterable

import numpy as np


def normalize_unicode(text: str) -> str:
    """Normalize Unicode text to NFC form as per RFC 8785"""
    return unicodedata.normalize("NFC", text)


def format_number(num) -> str:
    """Format numbers according to RFC 8785 rules"""
    if isinstance(num, (bool, np.bool_)):
        return "true" if num else "false"
    if isinstance(num, (int, np.integer)):
        return str(int(num))
    num = float(num)
    if num != num:
        raise ValueError("NaN values not allowed in JCS")
    if num in (float("inf"), float("-inf")):
        raise ValueError("Infinity values not allowed in JCS")
    if "e" in repr(num).lower():
        return repr(num)
    formatted = format(Decimal(repr(num)), "f")
    if "." in formatted:
        formatted = formatted.rstrip("0").rstrip(".")
    return formatted if formatted not in ("", "-0") else "0"


def escape_string(s: str) -> str:
    """Escape string according to RFC 8785 rules"""
    return json.dumps(normalize_unicode(s), ensure_ascii=False, separators=(",", ":"))


def canonicalize_value(obj: Any) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return format_number(obj)
    if isinstance(obj, str):
        return escape_string(obj)
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(canonicalize_value(item) for item in list(obj)) + "]"
    if isinstance(obj, dict):
        items = []
        for key in sorted(obj.keys()):
            if not isinstance(key, str):
                raise ValueError(f"Dictionary keys must be strings, got {type(key)}")
            items.append(f"{escape_string(key)}:{canonicalize_value(obj[key])}")
        return "{" + ",".join(items) + "}"
    raise ValueError(f"Unsupported type for JCS canonicalization: {type(obj)}")


def canonicalize(obj: Any) -> str:
    """Canonical JSON text: sorted keys, minimal whitespace, shortest round-trip numbers."""
    return canonicalize_value(obj)


def write_canonical(path: Path, obj: Any) -> None:
    Path(path).write_bytes(canonicalize(obj).encode("utf-8"))


def sha256_hexdigest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def cid_for_json(obj: Any) -> str:
    """Content identifier for a JSON object using RFC 8785 JCS"""
    return "sha256:" + sha256_hexdigest(canonicalize(obj).encode("utf-8"))


def cid_for_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def digest_tree(
    root: Path, exclude: Iterable[str] = ("timings",), skip_names: Iterable[str] = ("manifest.json",)
) -> Dict[str, str]:
    """Content identifiers of every file under root, keyed by posix relative path."""
    root = Path(root)
    skip = set(exclude)
    skip_files = set(skip_names)
    out: Dict[str, str] = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root)
        if (rel.parts and rel.parts[0] in skip) or path.name in skip_files:
            continue
        out[rel.as_posix()] = cid_for_file(path)
    return out
