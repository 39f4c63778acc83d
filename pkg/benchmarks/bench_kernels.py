"""Compare the compiled and pure Python embedding kernels.

Both lanes hash tokens into signed buckets and L2-normalize, and they are
required to produce bit-identical float64 output. This script checks that
equivalence on a synthetic corpus and reports throughput for each lane.

Run from the repository root:

    python3 benchmarks/bench_kernels.py --texts 20000 --dim 256
"""

import random
import time

import click
import numpy as np

from prismdb import kernels

WORDS = [
    "gun", "murder", "chase", "harbor", "night", "engine", "quiet",
    "garden", "storm", "glass", "paper", "orbit", "vendetta", "ledger",
    "meadow", "dawn", "heist", "run", "steel", "midnight",
]


def make_corpus(n: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    return [" ".join(rng.choices(WORDS, k=rng.randint(2, 12))) for _ in range(n)]


def run_lane(name: str, texts: list[str], dim: int, repeats: int):
    module = kernels.lane(name)
    out = np.zeros((len(texts), dim), dtype=np.float64)
    best = float("inf")
    for _ in range(repeats):
        out.fill(0.0)
        started = time.perf_counter()
        module.embed_into(texts, out)
        best = min(best, time.perf_counter() - started)
    return out, best


@click.command()
@click.option("--texts", "n_texts", default=20_000, show_default=True)
@click.option("--dim", default=256, show_default=True)
@click.option("--repeats", default=3, show_default=True, help="Keep the best of N runs.")
@click.option("--seed", default=7, show_default=True)
def main(n_texts: int, dim: int, repeats: int, seed: int) -> None:
    texts = make_corpus(n_texts, seed)
    py_out, py_time = run_lane("python", texts, dim, repeats)
    click.echo(f"python lane: {py_time:8.4f}s  ({n_texts / py_time:11,.0f} texts/s)")
    try:
        cy_out, cy_time = run_lane("cython", texts, dim, repeats)
    except ImportError:
        click.echo("cython lane: not built (pip install -e . rebuilds it)")
        return
    click.echo(f"cython lane: {cy_time:8.4f}s  ({n_texts / cy_time:11,.0f} texts/s)")
    click.echo(f"speedup: {py_time / cy_time:.1f}x")
    if np.array_equal(py_out, cy_out):
        click.echo("outputs are bit-identical across lanes")
    else:
        raise SystemExit("LANE MISMATCH: outputs differ between lanes")


if __name__ == "__main__":
    main()
