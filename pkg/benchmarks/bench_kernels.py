"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Shapes mirror a decoder
step at training scale (batch 64, hidden 200) and a retrieval query
against a mid-sized index.
"""
import argparse
import timeit

import numpy as np

from argen.kernels import available_backends


def lstm_inputs(batch, hidden, rng):
    z = rng.normal(size=(batch, 4 * hidden))
    c = rng.normal(size=(batch, hidden))
    return z, c


def postings(n_terms, n_docs, per_term, rng):
    counts = rng.integers(1, per_term, size=n_terms)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    doc_ids = np.concatenate([np.sort(rng.choice(n_docs, size=c, replace=False)) for c in counts]).astype(np.int64)
    weights = rng.random(len(doc_ids))
    return indptr, doc_ids, weights


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--hidden", type=int, default=200)
    ap.add_argument("--docs", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    z, c = lstm_inputs(args.batch, args.hidden, rng)
    dh, dc = rng.normal(size=c.shape), rng.normal(size=c.shape)
    indptr, doc_ids, weights = postings(5000, args.docs, 400, rng)
    terms = rng.choice(5000, size=12, replace=False).astype(np.int64)
    tw = rng.random(12)

    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the fallback only")
    rows = []
    for name, mod in backends.items():
        h, cn, acts, tc = mod.lstm_gates_forward(z, c)
        rows.append((name, "lstm_gates_forward", bench(lambda: mod.lstm_gates_forward(z, c), args.repeat)))
        rows.append((name, "lstm_gates_backward", bench(lambda: mod.lstm_gates_backward(dh, dc, acts, tc, c), args.repeat)))
        rows.append((name, "accumulate_scores", bench(lambda: mod.accumulate_scores(indptr, doc_ids, weights, terms, tw, args.docs), args.repeat)))

    if "compiled" in backends:
        a = backends["python"].lstm_gates_forward(z, c)[0]
        b = backends["compiled"].lstm_gates_forward(z, c)[0]
        print(f"max |h_python - h_compiled| = {np.abs(a - b).max():.2e}")
    base = {k: t for n, k, t in rows if n == "python"}
    print(f"{'backend':<10}{'kernel':<22}{'best (us)':>12}{'speedup':>10}")
    for name, kernel, t in rows:
        print(f"{name:<10}{kernel:<22}{t * 1e6:>12.1f}{base[kernel] / t:>10.2f}")


if __name__ == "__main__":
    main()
