import numpy as np
import scipy.sparse as sp

from weakindex.features import FeatureMatrix, FeatureSpace, tfidf
from weakindex.weaklabel import LabelKind, LabelMatrix


def redundant_feature_data(seed, n=600, redundant=10, noise=20, flip=0.15):
    """Concept feature equal to the label, ``redundant`` noisy copies of it and Poisson noise.

    Returns the TF-IDF weighted matrix (concept feature is the single
    semantic feature, stored last) and the labels.
    """
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.3).astype(np.uint8)
    cols = []
    for _ in range(redundant):
        cols.append(np.where(rng.random(n) < 1 - flip, y, 1 - y) * rng.integers(1, 3, n))
    for _ in range(noise):
        cols.append(rng.poisson(0.5, n))
    cols.append(y)
    X = np.column_stack(cols).astype(float)
    space = FeatureSpace.from_keys([f"w{j:02d}" for j in range(redundant + noise)], ["C1"])
    pmids = [f"r{i}" for i in range(n)]
    m = tfidf(FeatureMatrix(pmids, space, sp.csr_matrix(X)))
    return m, LabelMatrix(pmids, ["C1"], y.reshape(-1, 1), LabelKind.WEAK)


def matrix(rows, pmids=None):
    rows = np.asarray(rows, dtype=float)
    space = FeatureSpace.from_keys([f"f{j}" for j in range(rows.shape[1])], [])
    pmids = pmids or [f"p{i}" for i in range(rows.shape[0])]
    return FeatureMatrix(pmids, space, sp.csr_matrix(rows), True)


def labels(cols: dict, pmids):
    names = list(cols)
    cells = np.column_stack([np.asarray(cols[k]) for k in names])
    return LabelMatrix(pmids, names, cells, LabelKind.WEAK)


def bundled_experiment(dest, **overrides):
    """Copy the bundled synthetic experiment into ``dest`` with a reduced grid.

    Returns the path of the written config.
    """
    import json
    import shutil
    from importlib import resources
    from pathlib import Path

    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    src = resources.files("weakindex") / "data" / "synthetic200"
    for name in ("corpus.jsonl", "golden.csv", "thesaurus.json", "config.json"):
        with resources.as_file(src / name) as p:
            shutil.copyfile(p, dest / name)
    cfg = json.loads((dest / "config.json").read_text())
    cfg["selectors"] = {"methods": ["anova_f"], "k": [30], "exclude_ct_concepts": [False, True]}
    cfg["classifiers"] = {"types": ["logreg"], "penalties": ["l2"], "C": [1.0], "seed": 0}
    cfg["cv"] = {"k": 3, "seed": 0}
    cfg["baselines"] = {"kinds": ["AllAll", "WSLabels", "WSRestAll", "DTerms", "AllM"], "seed": 0}
    cfg.update(overrides)
    (dest / "config.json").write_text(json.dumps(cfg, indent=1))
    return dest / "config.json"


def combination_pool(descriptor, spec):
    """``spec``: list of (label set, count) -> (pmids, weak matrix over the descriptor)."""
    ids = descriptor.concept_ids
    rows, pmids = [], []
    for k, (combo, count) in enumerate(spec):
        for i in range(count):
            rows.append([1 if c in combo else 0 for c in ids])
            pmids.append(f"g{k}-{i}")
    cells = np.array(rows, dtype=np.uint8).reshape(len(rows), len(ids))
    return pmids, LabelMatrix(pmids, ids, cells, LabelKind.WEAK)
