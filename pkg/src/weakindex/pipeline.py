"""Config-driven execution of the whole experiment graph with a content
addressed stage cache and a run manifest.

Every stage output lives under ``<output_dir>/stages/<stage>/<key>/`` where
``key`` digests the stage parameters together with the digests of its
inputs, so an unchanged rerun finds every stage already done. Reports are
also copied to ``<output_dir>/reports/``.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import itertools
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .datasets import SplitBundle, build_ws, make_folds, split_ma1, split_ma2, undersample_majority
from .evalkit import BaselineError, BaselineKind, baseline_predict, evaluate, metrics_csv
from .features import (FeatureMatrix, FeatureScores, Method, SelectorConfig, apply_tfidf,
                       build_features, fit_idf, score_features, select_top_k, selection_report)
from .ingest import fetch_articles, load_corpus, save_corpus, search_pmids
from .learn import (Classifier, OvrModel, Penalty, TrainConfig, TrainingError, predict,
                    relabel_and_retrain, train)
from .recognizer import (Granularity, build_dictionary, import_occurrences, load_auxiliary,
                         load_occurrences, recognize_corpus, save_occurrences)
from .thesaurus import dumps_thesaurus, load_thesaurus
from .weaklabel import LabelKind, LabelMatrix, assign_weak_labels, target_labels

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
EXECUTION_KEYS = ("workers", "output_dir")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, manifest: "RunManifest | None" = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.manifest = manifest


# -- digests ------------------------------------------------------------------

def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def digest_json(obj: Any) -> str:
    return digest_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"))


# -- configuration ------------------------------------------------------------

@dataclass
class PipelineConfig:
    descriptor: Path
    corpus: dict
    occurrences: dict
    split: dict
    output_dir: Path
    selectors: dict
    classifiers: dict
    golden: Path | None = None
    undersample: dict | None = None
    min_token_df: int = 2
    min_support: int = 1
    cv: dict | None = None
    baselines: dict | None = None
    relabel: bool = False
    workers: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_json(cls, obj: dict, base_dir: str | Path = ".") -> "PipelineConfig":
        base = Path(base_dir)

        def path(p):
            return p if p is None else (base / p).resolve()

        def need(d: dict, key: str, where: str):
            if key not in d:
                raise ConfigError(f"{where}.{key} is required")
            return d[key]

        try:
            corpus = dict(need(obj, "corpus", "config"))
            if corpus.get("source") == "file":
                corpus["path"] = path(need(corpus, "path", "corpus"))
            elif corpus.get("source") != "fetch":
                raise ConfigError("corpus.source must be 'file' or 'fetch'")
            occ = dict(obj.get("occurrences", {"source": "builtin"}))
            if occ.get("source", "builtin") == "import":
                occ["path"] = path(need(occ, "path", "occurrences"))
            elif occ.get("source", "builtin") == "builtin":
                occ["source"] = "builtin"
                occ.setdefault("granularity", "term")
                if occ.get("auxiliary"):
                    occ["auxiliary"] = path(occ["auxiliary"])
            else:
                raise ConfigError("occurrences.source must be 'builtin' or 'import'")
            split = dict(need(obj, "split", "config"))
            for k in ("ma1_n", "ma2_n", "seed"):
                need(split, k, "split")
            under = obj.get("undersample")
            if under is not None:
                under = dict(under)
                targets = need(under, "target", "undersample")
                under["target"] = targets if isinstance(targets, list) else [targets]
                need(under, "seed", "undersample")
            selectors = dict(need(obj, "selectors", "config"))
            selectors.setdefault("methods", ["anova_f"])
            need(selectors, "k", "selectors")
            selectors.setdefault("exclude_ct_concepts", [False])
            selectors.setdefault("lexical_only", [False])
            selectors.setdefault("scope", "shared")
            classifiers = dict(need(obj, "classifiers", "config"))
            classifiers.setdefault("types", ["logreg"])
            classifiers.setdefault("penalties", ["l2"])
            classifiers.setdefault("C", [1.0])
            need(classifiers, "seed", "classifiers")
            cv = obj.get("cv")
            if cv is not None:
                need(cv, "k", "cv")
                need(cv, "seed", "cv")
            baselines = obj.get("baselines")
            if baselines is not None:
                need(baselines, "kinds", "baselines")
                need(baselines, "seed", "baselines")
            cfg = cls(
                descriptor=path(need(obj, "descriptor", "config")),
                corpus=corpus, occurrences=occ, split=split,
                output_dir=path(need(obj, "output_dir", "config")),
                selectors=selectors, classifiers=classifiers,
                golden=path(obj.get("golden")), undersample=under,
                min_token_df=int(obj.get("min_token_df", 2)),
                min_support=int(obj.get("min_support", 1)),
                cv=cv, baselines=baselines, relabel=bool(obj.get("relabel", False)),
                workers=int(obj.get("workers", 1)), raw=obj,
            )
        except (TypeError, AttributeError) as e:
            raise ConfigError(f"malformed config: {e}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_json(obj, path.parent)

    def validate(self) -> None:
        files = [self.descriptor, self.golden, self.corpus.get("path"),
                 self.occurrences.get("path"), self.occurrences.get("auxiliary")]
        for f in files:
            if f is not None and not Path(f).is_file():
                raise ConfigError(f"file not found: {f}")
        for name, grid in (("selectors.methods", self.selectors["methods"]),
                           ("selectors.k", self.selectors["k"]),
                           ("selectors.exclude_ct_concepts", self.selectors["exclude_ct_concepts"]),
                           ("selectors.lexical_only", self.selectors["lexical_only"]),
                           ("classifiers.types", self.classifiers["types"]),
                           ("classifiers.penalties", self.classifiers["penalties"]),
                           ("classifiers.C", self.classifiers["C"])):
            if not isinstance(grid, list) or not grid:
                raise ConfigError(f"{name} must be a non-empty list")
        try:
            for m in self.selectors["methods"]:
                Method(m)
            for t in self.classifiers["types"]:
                Classifier(t)
            for p in self.classifiers["penalties"]:
                Penalty(p)
            for b in (self.baselines or {}).get("kinds", []):
                BaselineKind(b)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def digest(self) -> str:
        """Digest of the experiment definition; execution-only keys do not count."""
        return digest_json({k: v for k, v in self.raw.items() if k not in EXECUTION_KEYS})

    # -- grid expansion ----------------------------------------------

    def selector_grid(self) -> list[SelectorConfig]:
        s = self.selectors
        return [SelectorConfig(Method(m), int(k), bool(e), bool(lo), s["scope"])
                for m, k, e, lo in itertools.product(s["methods"], s["k"],
                                                     s["exclude_ct_concepts"], s["lexical_only"])]

    def classifier_grid(self) -> list[TrainConfig]:
        c = self.classifiers
        common = {k: c[k] for k in ("max_iters", "tol", "max_depth", "min_leaf", "n_trees",
                                    "feature_subsample") if k in c}
        out = []
        for t in c["types"]:
            if Classifier(t) in (Classifier.LOGREG, Classifier.LINEAR_SVM):
                for p, C in itertools.product(c["penalties"], c["C"]):
                    out.append(TrainConfig(Classifier(t), Penalty(p), float(C), seed=c["seed"], **common))
            else:
                out.append(TrainConfig(Classifier(t), seed=c["seed"], **common))
        return out

    def training_sets(self) -> list[str]:
        names = ["ws"]
        if self.undersample:
            names += [f"ws_und_{t}" for t in self.undersample["target"]]
        return names


# -- manifest -----------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    key: str
    status: str
    outputs: dict[str, str]
    label: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "label": self.label, "key": self.key, "status": self.status,
                "outputs": self.outputs}


@dataclass
class RunManifest:
    config_digest: str
    input_digests: dict[str, str]
    tool_version: str
    started: str
    finished: str = ""
    stages: list[StageRecord] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "input_digests": self.input_digests,
            "tool_version": self.tool_version,
            "started": self.started,
            "finished": self.finished,
            "stages": [s.to_json() for s in self.stages],
            "files": self.files,
            "warnings": self.warnings,
            "error": self.error,
        }

    def report_digests(self) -> dict[str, str]:
        return {k: v for k, v in self.files.items() if k.startswith("reports/")}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class StageCache:
    """Content-addressed stage directories with atomic publication."""

    def __init__(self, root: Path, manifest: RunManifest):
        self.root = root
        self.manifest = manifest

    def run(self, name: str, params: Any, compute: Callable[[Path], None], label: str = "") -> Path:
        key = digest_json({"stage": name, "params": params, "version": __version__})[:20]
        final = self.root / name / key
        marker = final / "_stage.json"
        if marker.exists():
            recorded = json.loads(marker.read_text())["outputs"]
            if all((final / f).is_file() and digest_file(final / f) == d for f, d in recorded.items()):
                self.manifest.stages.append(StageRecord(name, key, "cached", recorded, label))
                return final
            shutil.rmtree(final)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{key}-", dir=final.parent))
        try:
            compute(tmp)
        except StageError:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        except Exception as e:
            shutil.rmtree(tmp, ignore_errors=True)
            raise StageError(name, f"{type(e).__name__}: {e}", self.manifest) from e
        outputs = {p.relative_to(tmp).as_posix(): digest_file(p)
                   for p in sorted(tmp.rglob("*")) if p.is_file()}
        (tmp / "_stage.json").write_text(json.dumps({"stage": name, "params": params,
                                                     "outputs": outputs}, indent=1, default=str))
        try:
            os.replace(tmp, final)
        except OSError:
            # another worker published the same key first
            shutil.rmtree(tmp, ignore_errors=True)
        self.manifest.stages.append(StageRecord(name, key, "computed", outputs, label))
        return final


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


# -- shared helpers used by the CLI as well --------------------------------------

@dataclass
class Selection:
    """Selected feature ids plus the idf fitted on the training rows."""

    config: SelectorConfig
    training_set: str
    feature_ids: list[int]
    idf: np.ndarray
    space_digest: str

    def to_json(self) -> dict:
        return {"config": self.config.to_json(), "training_set": self.training_set,
                "feature_ids": self.feature_ids, "idf": [float(x) for x in self.idf],
                "space_digest": self.space_digest}

    @classmethod
    def from_json(cls, obj: dict) -> "Selection":
        return cls(SelectorConfig(**obj["config"]), obj["training_set"], list(obj["feature_ids"]),
                   np.array(obj["idf"], dtype=float), obj["space_digest"])

    def matrix(self, raw: FeatureMatrix, pmids) -> FeatureMatrix:
        """Weighted rows of ``pmids`` over the selected features."""
        if raw.space.digest() != self.space_digest:
            raise ValueError("raw feature matrix does not match the selection's feature space")
        return apply_tfidf(raw.rows(pmids).columns(self.feature_ids), self.idf)


def make_selection(raw: FeatureMatrix, weak: LabelMatrix, train_pmids, targets, cfg: SelectorConfig,
                   descriptor, training_set: str = "ws",
                   scores: FeatureScores | None = None) -> tuple[Selection, FeatureScores]:
    train_raw = raw.rows(train_pmids)
    if scores is None:
        scores = score_features(apply_tfidf(train_raw, fit_idf(train_raw)),
                                weak.rows(train_pmids), targets, cfg.method)
    ids = select_top_k(scores, cfg, raw.space, descriptor)
    idf = fit_idf(train_raw.columns(ids))
    return Selection(cfg, training_set, ids, idf, raw.space.digest()), scores


def cross_validate(raw: FeatureMatrix, labels: LabelMatrix, pmids, targets, selection: Selection,
                   cfg: TrainConfig, k: int, seed: int) -> tuple[LabelMatrix, float]:
    """Pooled out-of-fold predictions against ``labels`` and their macro-F1.

    Features stay fixed to ``selection``; idf is refitted on each fold's
    training part.
    """
    plan = make_folds(list(pmids), k, seed)
    pred_rows: dict[str, np.ndarray] = {}
    for f in range(k):
        tr, te = plan.train_test(f)
        tr_raw = raw.rows(tr).columns(selection.feature_ids)
        idf = fit_idf(tr_raw)
        model = train(apply_tfidf(tr_raw, idf), labels.rows(tr), targets, cfg)
        p = predict(model, apply_tfidf(raw.rows(te).columns(selection.feature_ids), idf))
        for pm, row in zip(p.pmids, p.cells):
            pred_rows[pm] = row
    pmids = list(pmids)
    pred = LabelMatrix(pmids, targets, np.array([pred_rows[p] for p in pmids]), LabelKind.PREDICTED)
    _, macro = evaluate(pred, labels.rows(pmids), targets)
    return pred, macro


def _training_pmids(name: str, splits: SplitBundle, weak: LabelMatrix, descriptor,
                    under_seed: int | None) -> list[str]:
    if name == "ws":
        return list(splits.ws)
    target = int(name.rsplit("_", 1)[1])
    return undersample_majority(splits.ws, weak, descriptor, target, under_seed)


def _cell_name(ts: str, sel: SelectorConfig, tc: TrainConfig) -> str:
    parts = [ts, f"{sel.method.value}-k{sel.k}"]
    if sel.exclude_ct_concepts:
        parts.append("noct")
    if sel.lexical_only:
        parts.append("lex")
    if tc.linear:
        parts.append(f"{tc.classifier.value}-{tc.penalty.value}-C{tc.C:g}")
    else:
        parts.append(tc.classifier.value)
    return "__".join(parts)


# -- run ------------------------------------------------------------------------------

def run(config: PipelineConfig) -> RunManifest:
    """Execute every stage; returns the manifest, also written to the output dir.

    Raises:
        StageError: naming the failing stage; the partial manifest is written
            before raising.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"descriptor": digest_file(config.descriptor)}
    for name, p in (("corpus", config.corpus.get("path")), ("occurrences", config.occurrences.get("path")),
                    ("auxiliary", config.occurrences.get("auxiliary")), ("golden", config.golden)):
        if p is not None:
            inputs[name] = digest_file(p)
    manifest = RunManifest(config.digest(), inputs, __version__, _now())
    cache = StageCache(out / "stages", manifest)
    try:
        _run(config, cache, manifest, out)
    except StageError as e:
        manifest.error = str(e)
        e.manifest = manifest
        _finish(manifest, out)
        raise
    _finish(manifest, out)
    return manifest


def _finish(manifest: RunManifest, out: Path) -> None:
    manifest.finished = _now()
    manifest.files = {p.relative_to(out).as_posix(): digest_file(p)
                      for p in sorted(out.rglob("*"))
                      if p.is_file() and p.name != MANIFEST and not p.name.startswith(".")}
    tmp = out / f".{MANIFEST}.tmp"
    tmp.write_text(json.dumps(manifest.to_json(), indent=1) + "\n", encoding="utf-8")
    os.replace(tmp, out / MANIFEST)


def _run(config: PipelineConfig, cache: StageCache, manifest: RunManifest, out: Path) -> None:
    warn = manifest.warnings.append

    # thesaurus
    def do_thesaurus(d: Path):
        _write_text(d / "thesaurus.json", dumps_thesaurus(load_thesaurus(config.descriptor)))
    th_dir = cache.run("thesaurus", {"input": manifest.input_digests["descriptor"]}, do_thesaurus)
    descriptor = load_thesaurus(th_dir / "thesaurus.json")
    th_digest = digest_file(th_dir / "thesaurus.json")

    # ingest
    src = config.corpus
    if src["source"] == "file":
        ingest_params = {"source": "file", "input": manifest.input_digests["corpus"]}
    else:
        ingest_params = {k: v for k, v in src.items()} | {"descriptor_id": descriptor.descriptor_id}

    def do_ingest(d: Path):
        if src["source"] == "file":
            corpus = load_corpus(src["path"], descriptor.descriptor_id)
            save_corpus(corpus, d / "corpus.jsonl")
            return
        endpoint = src.get("endpoint", "https://eutils.ncbi.nlm.nih.gov/entrez/eutils/")
        pmids = search_pmids(descriptor.descriptor_id, endpoint, int(src.get("page_size", 10000)),
                             term=src.get("term"))
        res = fetch_articles(pmids, endpoint, int(src.get("batch_size", 200)),
                             descriptor.descriptor_id, state_dir=out / "fetch_state")
        save_corpus(res.corpus, d / "corpus.jsonl")
        _write_text(d / "fetch_manifest.json", json.dumps(res.manifest(), indent=1) + "\n")
    ing_dir = cache.run("ingest", ingest_params, do_ingest)
    corpus = load_corpus(ing_dir / "corpus.jsonl", descriptor.descriptor_id)
    corpus_digest = digest_file(ing_dir / "corpus.jsonl")

    # recognize
    occ_cfg = config.occurrences
    rec_params = {"corpus": corpus_digest, "thesaurus": th_digest, "source": occ_cfg["source"],
                  "granularity": occ_cfg.get("granularity"),
                  "auxiliary": manifest.input_digests.get("auxiliary"),
                  "import": manifest.input_digests.get("occurrences")}

    def do_recognize(d: Path):
        if occ_cfg["source"] == "import":
            occ = import_occurrences(occ_cfg["path"], corpus)
        else:
            aux = load_auxiliary(occ_cfg["auxiliary"]) if occ_cfg.get("auxiliary") else None
            occ = recognize_corpus(corpus, build_dictionary(descriptor, occ_cfg["granularity"], aux))
        save_occurrences(occ, d / "occurrences.jsonl")
    rec_dir = cache.run("recognize", rec_params, do_recognize)
    occurrences = load_occurrences(rec_dir / "occurrences.jsonl")
    occ_digest = digest_file(rec_dir / "occurrences.jsonl")

    # weak labels
    def do_weak(d: Path):
        weak = assign_weak_labels(corpus, occurrences, descriptor)
        weak.save(d / "weak.csv")
        targets = target_labels(weak, descriptor, config.min_support)
        _write_text(d / "targets.json", json.dumps(targets) + "\n")
    wl_dir = cache.run("weaklabel", {"occ": occ_digest, "corpus": corpus_digest,
                                     "thesaurus": th_digest, "min_support": config.min_support},
                       do_weak)
    weak = LabelMatrix.load(wl_dir / "weak.csv", LabelKind.WEAK)
    targets = json.loads((wl_dir / "targets.json").read_text())
    weak_digest = digest_file(wl_dir / "weak.csv")

    # splits
    sp_cfg = config.split
    under = config.undersample or {}

    def do_split(d: Path):
        pmids = corpus.pmids
        ma1 = split_ma1(pmids, int(sp_cfg["ma1_n"]), int(sp_cfg["seed"]))
        rest = [p for p in pmids if p not in set(ma1)]
        ma2 = split_ma2(rest, weak, descriptor, int(sp_cfg["ma2_n"]), int(sp_cfg["seed"]))
        ws = build_ws(pmids, ma1, ma2, weak)
        SplitBundle(ma1, ma2, ws, int(sp_cfg["seed"])).save(d / "splits.json")
        sets = {name: _training_pmids(name, SplitBundle(ma1, ma2, ws, 0), weak, descriptor,
                                      under.get("seed"))
                for name in config.training_sets()}
        _write_text(d / "training_sets.json", json.dumps(sets, indent=0) + "\n")
        counts = {name: {"total": len(p), **weak.rows(p).support()} for name, p in sets.items()}
        for name, p in (("ma1", ma1), ("ma2", ma2)):
            counts[name] = {"total": len(p), **weak.rows(p).support()}
        _write_text(d / "split_counts.json", json.dumps(counts, indent=1) + "\n")
    split_dir = cache.run("split", {"weak": weak_digest, **sp_cfg, "undersample": under,
                                    "sets": config.training_sets()}, do_split)
    splits = SplitBundle.load(split_dir / "splits.json")
    training_sets = json.loads((split_dir / "training_sets.json").read_text())
    split_digest = digest_file(split_dir / "training_sets.json") + digest_file(split_dir / "splits.json")

    # featurize: the space comes from the full WS training set
    def do_featurize(d: Path):
        ws_set = set(splits.ws)
        ws_corpus = corpus.subset(splits.ws)
        space, _ = build_features(ws_corpus, [o for o in occurrences if o.pmid in ws_set],
                                  config.min_token_df)
        _, raw = build_features(corpus, occurrences, space=space)
        raw.save(d / "raw.npz")
    feat_dir = cache.run("featurize", {"corpus": corpus_digest, "occ": occ_digest,
                                       "split": split_digest, "min_token_df": config.min_token_df},
                         do_featurize)
    raw = FeatureMatrix.load(feat_dir / "raw.npz")
    feat_digest = digest_file(feat_dir / "raw.npz")

    golden = LabelMatrix.load(config.golden, LabelKind.GOLDEN) if config.golden else None
    test_sets = {}
    if golden is None:
        warn("no golden labels configured; test-set evaluation skipped")
    else:
        for name, pm in (("ma1", splits.ma1), ("ma2", splits.ma2)):
            missing = [p for p in pm if p not in set(golden.pmids)]
            if missing:
                warn(f"{name}: {len(missing)} articles lack golden labels; {name} evaluation skipped")
            elif pm:
                test_sets[name] = golden.align(pm, targets)

    # selection (per training set x selector)
    selections: dict[tuple[str, SelectorConfig], Selection] = {}
    scores_mem: dict[tuple[str, Method], FeatureScores] = {}
    for ts in config.training_sets():
        for sel in config.selector_grid():
            params = {"features": feat_digest, "weak": weak_digest, "split": split_digest,
                      "thesaurus": th_digest, "training_set": ts, "selector": sel.to_json(),
                      "targets": targets}

            def do_select(d: Path, ts=ts, sel=sel):
                selection, scores = make_selection(raw, weak, training_sets[ts], targets, sel,
                                                   descriptor, ts, scores_mem.get((ts, sel.method)))
                scores_mem[(ts, sel.method)] = scores
                _write_text(d / "selection.json", json.dumps(selection.to_json()) + "\n")
                _write_text(d / "features.csv",
                            selection_report(scores, selection.feature_ids, raw.space))
                if scores.degenerate_labels:
                    _write_text(d / "degenerate_labels.json",
                                json.dumps(scores.degenerate_labels) + "\n")
            sdir = cache.run("select", params, do_select, label=f"{ts}/{sel.method.value}-k{sel.k}")
            selections[(ts, sel)] = Selection.from_json(json.loads((sdir / "selection.json").read_text()))

    # train + evaluate grid cells
    cells = [(ts, sel, tc) for ts in config.training_sets() for sel in config.selector_grid()
             for tc in config.classifier_grid()]
    golden_digest = manifest.input_digests.get("golden")

    def run_cell(cell):
        ts, sel, tc = cell
        selection = selections[(ts, sel)]
        name = _cell_name(ts, sel, tc)
        train_pm = training_sets[ts]
        base = {"features": feat_digest, "weak": weak_digest, "split": split_digest,
                "selection": selection.to_json(), "train": tc.to_json(), "targets": targets}

        def do_train(d: Path):
            model = train(selection.matrix(raw, train_pm), weak.rows(train_pm), targets, tc)
            model.save(d / "model.json")
        tdir = cache.run("train", base, do_train, label=name)
        model = OvrModel.load(tdir / "model.json")
        result = {"cell": name, "training_set": ts, **sel.to_json(), **tc.to_json()}

        def do_eval(d: Path):
            metrics = {}
            for tname, gold in test_sets.items():
                pred = predict(model, selection.matrix(raw, gold.pmids))
                pred.save(d / f"pred_{tname}.csv")
                per, macro = evaluate(pred, gold, targets)
                _write_text(d / f"eval_{tname}.csv", metrics_csv(per, macro))
                metrics[tname] = macro
            _write_text(d / "metrics.json", json.dumps(metrics, sort_keys=True) + "\n")
        edir = cache.run("evaluate", {"model": digest_file(tdir / "model.json"),
                                      "golden": golden_digest, "split": split_digest},
                         do_eval, label=name)
        result.update({f"macro_f1_{k}": v
                       for k, v in json.loads((edir / "metrics.json").read_text()).items()})
        result["_eval_dir"] = edir
        result["_model"] = model

        if config.cv:
            k, seed = int(config.cv["k"]), int(config.cv["seed"])

            def do_cv(d: Path):
                try:
                    _, macro = cross_validate(raw, weak, train_pm, targets, selection, tc, k, seed)
                except TrainingError as e:
                    macro = None
                    _write_text(d / "cv_error.txt", str(e) + "\n")
                _write_text(d / "cv.json", json.dumps({"k": k, "macro_f1": macro}) + "\n")
            cdir = cache.run("cv", {**base, "k": k, "seed": seed}, do_cv, label=name)
            result["cv_macro_f1"] = json.loads((cdir / "cv.json").read_text())["macro_f1"]
        return result

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]
    for r in results:
        for w in r["_model"].warnings:
            warn(f"{r['cell']}: {w}")

    # baselines
    baseline_rows = []
    if config.baselines and test_sets:
        dicts = {g: build_dictionary(descriptor, g) for g in Granularity}
        bseed = int(config.baselines["seed"])

        def do_baselines(d: Path):
            rows = []
            for kind in config.baselines["kinds"]:
                row = {"baseline": kind}
                for tname, gold in test_sets.items():
                    try:
                        pred = baseline_predict(kind, corpus.subset(gold.pmids), weak, targets,
                                                descriptor, dicts, bseed)
                    except BaselineError as e:
                        row["error"] = str(e)
                        break
                    per, macro = evaluate(pred, gold, targets)
                    _write_text(d / f"{kind}_{tname}.csv", metrics_csv(per, macro))
                    row[f"macro_f1_{tname}"] = macro
                rows.append(row)
            _write_text(d / "baselines.json", json.dumps(rows, indent=1) + "\n")
        bdir = cache.run("baseline", {"weak": weak_digest, "golden": golden_digest,
                                      "split": split_digest, "thesaurus": th_digest,
                                      "kinds": config.baselines["kinds"], "seed": bseed},
                         do_baselines)
        baseline_rows = json.loads((bdir / "baselines.json").read_text())
        for row in baseline_rows:
            if "error" in row:
                warn(f"baseline {row['baseline']} skipped: {row['error']}")

    # relabel-and-retrain on the best linear cell
    relabel_row = None
    if config.relabel:
        linear = [r for r in results if r["classifier"] in ("logreg", "linear_svm")]
        score = (lambda r: np.mean([r[f"macro_f1_{t}"] for t in test_sets])) if test_sets \
            else (lambda r: r.get("cv_macro_f1") or 0.0)
        if linear:
            best = max(linear, key=lambda r: (score(r), -linear.index(r)))
            ts = best["training_set"]
            sel = next(s for (t, s) in selections if t == ts and _cell_name(ts, s, best["_model"].config) == best["cell"])
            selection = selections[(ts, sel)]
            train_pm = training_sets[ts]

            def do_relabel(d: Path):
                res = relabel_and_retrain(best["_model"], selection.matrix(raw, train_pm),
                                          weak.rows(train_pm), best["_model"].config)
                res.relabeled.save(d / "relabeled.csv")
                res.retrained.save(d / "model.json")
                row = {"cell": best["cell"], "skipped": res.skipped,
                       "changed_cells": int((res.relabeled.cells != res.original_labels.cells).sum())}
                for tname, gold in test_sets.items():
                    pred = predict(res.retrained, selection.matrix(raw, gold.pmids))
                    per, macro = evaluate(pred, gold, [t for t in targets if t not in res.skipped])
                    _write_text(d / f"eval_{tname}.csv", metrics_csv(per, macro))
                    row[f"macro_f1_{tname}_before"] = best.get(f"macro_f1_{tname}")
                    row[f"macro_f1_{tname}_after"] = macro
                _write_text(d / "relabel.json", json.dumps(row, indent=1) + "\n")
            rdir = cache.run("relabel", {"model": digest_json(best["_model"].to_json()),
                                         "golden": golden_digest, "split": split_digest},
                             do_relabel, label=best["cell"])
            relabel_row = json.loads((rdir / "relabel.json").read_text())

    # reports
    def do_report(d: Path):
        cols = ["cell", "training_set", "method", "k", "exclude_ct_concepts", "lexical_only",
                "classifier", "penalty", "C"] + [f"macro_f1_{t}" for t in test_sets]
        if config.cv:
            cols.append("cv_macro_f1")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["configuration", *[c for c in cols if c.startswith(("macro", "cv"))]])
        grid = io.StringIO()
        gw = csv.writer(grid, lineterminator="\n")
        gw.writerow(cols)
        for r in results:
            gw.writerow([_csv_value(r.get(c)) for c in cols])
            w.writerow([r["cell"], *[_csv_value(r.get(c)) for c in cols if c.startswith(("macro", "cv"))]])
        for row in baseline_rows:
            if "error" not in row:
                w.writerow([f"baseline:{row['baseline']}",
                            *[_csv_value(row.get(c)) for c in cols if c.startswith("macro")],
                            *([""] if config.cv else [])])
        _write_text(d / "grid.csv", grid.getvalue())
        _write_text(d / "plot_data.csv", buf.getvalue())
        evaldir = d / "eval"
        evaldir.mkdir()
        for r in results:
            for tname in test_sets:
                shutil.copyfile(r["_eval_dir"] / f"eval_{tname}.csv", evaldir / f"{r['cell']}__{tname}.csv")
        bundle = {
            "config_digest": manifest.config_digest,
            "input_digests": manifest.input_digests,
            "targets": targets,
            "split_counts": json.loads((split_dir / "split_counts.json").read_text()),
            "grid": [{k: v for k, v in r.items() if not k.startswith("_")} for r in results],
            "baselines": baseline_rows,
            "relabel": relabel_row,
        }
        _write_text(d / "evaluation.json", json.dumps(bundle, indent=1, sort_keys=True) + "\n")
    report_params = {"results": [{k: v for k, v in r.items() if not k.startswith("_")} for r in results],
                     "baselines": baseline_rows, "relabel": relabel_row, "config": manifest.config_digest,
                     "inputs": manifest.input_digests, "split": split_digest}
    rep_dir = cache.run("report", report_params, do_report)
    reports = out / "reports"
    if reports.exists():
        shutil.rmtree(reports)
    shutil.copytree(rep_dir, reports, ignore=shutil.ignore_patterns("_stage.json"))


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
