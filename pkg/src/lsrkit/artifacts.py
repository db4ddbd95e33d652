"""On-disk formats: CSV tables, raw float vectors and run manifests.

Floats in CSV cells use ``repr``, the shortest decimal string that reads
back to the same double, so files round-trip losslessly and diff cleanly.
"""

import csv
import os
import struct
import subprocess
import tempfile
import time

import numpy as np

from . import __version__
from .errors import FileFormatError

LSR_RESULT_COLUMNS = ("rank", "loss_before", "loss_after", "test_error_before", "test_error_after", "kappa",
                      "y_norm", "seconds")


def cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([cell(v) for v in row])
    return path


def read_csv(path):
    """Header and rows as strings."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_vector(path, v):
    """8-byte little-endian length, then the entries as little-endian doubles."""
    v = np.ascontiguousarray(np.asarray(v, dtype="<f8").ravel())
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", v.size))
        fh.write(v.tobytes())
    return path


def read_vector(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise FileFormatError(f"{path}: truncated vector header")
    (n,) = struct.unpack("<Q", data[:8])
    if len(data) != 8 + 8 * n:
        raise FileFormatError(f"{path}: header says {n} entries, file holds {(len(data) - 8) / 8:g}")
    return np.frombuffer(data[8:], dtype="<f8").astype(np.float64)


def lsr_result_row(res, test_error_before=np.nan, test_error_after=np.nan):
    return (res.rank, res.loss_before, res.loss_after, test_error_before, test_error_after, res.kappa, res.y_norm,
            res.seconds)


def write_lsr_results(path, rows):
    """``rows`` are tuples from :func:`lsr_result_row` or RankRow objects."""
    out = []
    for r in rows:
        if hasattr(r, "as_row"):
            r = r.as_row()
        out.append(r)
    return write_csv(path, LSR_RESULT_COLUMNS, out)


def version_string():
    """Package version plus ``git describe`` of the source tree when available."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True, text=True,
                             timeout=5)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def write_manifest(path, config_text, seeds, artifacts, started, finished=None, extra=None):
    """Plain-text run manifest, written to a temp file and renamed into place."""
    finished = time.time() if finished is None else finished
    lines = [
        f"version = {version_string()}",
        f"started = {time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(started))}",
        f"finished = {time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(finished))}",
    ]
    lines += [f"seed.{k} = {v}" for k, v in sorted(seeds.items())]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    lines.append("")
    lines.append("[artifacts]")
    for a in artifacts:
        lines.append(f"{os.path.basename(a)} = {os.path.getsize(a)} bytes")
    lines.append("")
    lines.append("[config]")
    lines.append(config_text.rstrip("\n"))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".manifest-")
    with os.fdopen(fd, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path
