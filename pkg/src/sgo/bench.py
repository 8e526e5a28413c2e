"""Cost measurement for induced vs full self-attention over Gaussian tokens.

Runs a single forward pass of each attention block under a recording tape and
reports the counters the tape accumulated: floating point operations and
bytes allocated for intermediate arrays. Full self-attention materializes an
(N, N) score matrix, so its memory cost grows quadratically in the token
count; the induced variant only ever builds (M, N) and (N, M) matrices.
"""
from __future__ import annotations

import csv

import numpy as np

from . import diffcore as dc
from .transformer import FullSelfAttention, InducedSelfAttention


def measure_attention(kind, n_tokens, dim=64, m_inducing=500, heads=4, seed=0,
                      cap=1 << 30):
    ps = dc.ParamStore(seed=seed)
    if kind == "induced":
        block = InducedSelfAttention(ps, "bench", dim, m_inducing, heads)
    elif kind == "full":
        block = FullSelfAttention(ps, "bench", dim, heads, n_cap=cap)
    else:
        raise ValueError(f"unknown attention kind '{kind}'")
    rng = np.random.default_rng(seed)
    x = dc.constant(rng.normal(0.0, 1.0, (n_tokens, dim)))
    with dc.recording() as tape:
        block(x)
    return {"kind": kind, "n": n_tokens, "dim": dim, "m": m_inducing,
            "flops": tape.flops, "bytes": tape.bytes_allocated}


def run_bench(sizes=(1000, 2000, 4000), dim=64, m_inducing=500, heads=4,
              seed=0):
    rows = []
    for kind in ("induced", "full"):
        for n in sizes:
            rows.append(measure_attention(kind, n, dim, m_inducing, heads,
                                          seed=seed))
    return rows


def doubling_ratios(rows):
    """bytes(2N)/bytes(N) per kind, the empirical scaling exponent probe."""
    by_kind = {}
    for r in rows:
        by_kind.setdefault(r["kind"], []).append(r)
    out = {}
    for kind, rs in by_kind.items():
        rs = sorted(rs, key=lambda r: r["n"])
        ratios = []
        for a, b in zip(rs[:-1], rs[1:]):
            if b["n"] == 2 * a["n"]:
                ratios.append({"n_from": a["n"], "n_to": b["n"],
                               "bytes_ratio": b["bytes"] / a["bytes"],
                               "flops_ratio": b["flops"] / a["flops"]})
        out[kind] = ratios
    return out


def write_bench_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
