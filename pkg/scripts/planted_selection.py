"""Feature-selection sanity check on a matrix with a few planted informative columns."""

from __future__ import annotations

import argparse
from collections import Counter

import numpy as np

from apnea_kit.forest import ForestParams
from apnea_kit.pipeline import make_folds
from apnea_kit.select import run_selection
from apnea_kit.synth import planted_matrix


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--informative", type=int, default=5)
    p.add_argument("--noise", type=int, default=45)
    p.add_argument("--effect", type=float, default=0.9)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--trees", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    X = planted_matrix(n_informative=args.informative, n_noise=args.noise, effect=args.effect, seed=args.seed)
    folds = make_folds(sorted(set(X.groups)), args.folds, seed=args.seed)
    pairs = [(X.rows(np.isin(X.groups, f.train)), X.rows(np.isin(X.groups, f.val))) for f in folds]
    res = run_selection(pairs, ForestParams(args.trees, 10, seed=args.seed), repeats=2)

    informative = {n for n in X.names if n.startswith("inf_")}
    print(f"chosen feature count: {res.chosen_count}")
    for t in res.traces:
        kept = res.selected[t.fold]
        print(f"fold {t.fold}: sizes {t.sizes()} informative kept {len(informative & set(kept))}/{len(informative)}")
    freq = Counter(n for v in res.selected.values() for n in v)
    print("most frequent:", ", ".join(f"{n}({c})" for n, c in freq.most_common(10)))


if __name__ == "__main__":
    main()
