"""
Report rendering: per-slice magnitude maps as 16-bit PGM, the metrics table as
CSV and Markdown, and a manifest of content digests for the whole output tree.
"""
import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from mrsi.errors import DataError
from mrsi.pipeline.quality import ScoreRow
from mrsi.utils.jcs import cid_for_json, digest_tree, write_canonical

log = logging.getLogger("mrsi.report")

CSV_FIELDS = ("method", "af", "nrmse", "ssim", "cc", "bias", "loa_low", "loa_high")
PGM_MAX = 65535


def write_pgm(path, image: np.ndarray, peak: float) -> None:
    """Binary 16-bit PGM, rows along y, magnitude scaled so `peak` maps to full range."""
    img = np.abs(np.asarray(image, dtype=np.complex128))
    if img.ndim != 2:
        raise DataError(f"PGM needs a 2-D image, got shape {img.shape}")
    scale = PGM_MAX / peak if peak > 0 else 0.0
    pix = np.clip(np.rint(img.T * scale), 0, PGM_MAX).astype(">u2")
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{PGM_MAX}\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w).T


def write_slices(out_dir, name: str, volume: np.ndarray, peak: float) -> List[Path]:
    out = []
    for z in range(volume.shape[2]):
        p = Path(out_dir) / f"{name}_z{z}.pgm"
        write_pgm(p, volume[:, :, z], peak)
        out.append(p)
    return out


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def write_metrics_csv(path, rows: Iterable[ScoreRow]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            d = r.as_dict()
            w.writerow([_fmt(d[k]) for k in CSV_FIELDS])


def read_metrics_csv(path) -> List[ScoreRow]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p} is missing")
    with open(p, newline="") as fh:
        return [
            ScoreRow(r["method"], *(float(r[k]) for k in CSV_FIELDS[1:]))
            for r in csv.DictReader(fh)
        ]


def summary_markdown(rows: Sequence[ScoreRow], extra: Optional[Dict[str, str]] = None) -> str:
    """Method x AF tables of NRMSE and SSIM, then method agreement rows."""
    afs = sorted({r.af for r in rows})
    methods = sorted({r.method for r in rows if "_vs_" not in r.method})
    lookup = {(r.method, r.af): r for r in rows}
    lines = ["# Reconstruction summary", ""]
    for metric in ("nrmse", "ssim", "cc"):
        lines.append(f"## {metric.upper()}")
        lines.append("")
        lines.append("| method | " + " | ".join(f"AF {a:g}" for a in afs) + " |")
        lines.append("|---" * (len(afs) + 1) + "|")
        for meth in methods:
            cells = [f"{getattr(lookup[(meth, a)], metric):.4f}" if (meth, a) in lookup else "-" for a in afs]
            lines.append(f"| {meth} | " + " | ".join(cells) + " |")
        lines.append("")
    agreement = [r for r in rows if "_vs_" in r.method]
    if agreement:
        lines += ["## Method agreement", "", "| pair | AF | CC | bias | LoA |", "|---|---|---|---|---|"]
        for r in sorted(agreement, key=lambda r: (r.method, r.af)):
            lines.append(f"| {r.method} | {r.af:g} | {r.cc:.4f} | {r.bias:.4g} | [{r.loa_low:.4g}, {r.loa_high:.4g}] |")
        lines.append("")
    for key, value in (extra or {}).items():
        lines.append(f"- {key}: {value}")
    return "\n".join(lines).rstrip() + "\n"


def write_manifest(root) -> Dict[str, str]:
    """Digest every artifact under root except timings; written to report/manifest.json.

    `tree` identifies the whole output: equal trees give equal ids.
    """
    root = Path(root)
    files = digest_tree(root)
    tree = cid_for_json(files)
    write_canonical(root / "report" / "manifest.json", {"files": files, "tree": tree})
    log.info("manifest: %d files, tree %s", len(files), tree)
    return files
