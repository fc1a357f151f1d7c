"""Command line entry point: one subcommand per stage plus ``run`` and ``synth``.

Every failure exits nonzero with ``weakindex <stage>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path

from . import __version__


def _corpus(args):
    from .ingest import load_corpus
    return load_corpus(args.corpus)


def _weak(path):
    from .weaklabel import LabelKind, LabelMatrix
    return LabelMatrix.load(path, LabelKind.WEAK)


def _targets(args, weak, descriptor):
    from .weaklabel import target_labels
    if getattr(args, "targets", None):
        return json.loads(Path(args.targets).read_text())
    return target_labels(weak, descriptor)


def _pmids(args, splits_attr=None):
    from .datasets import SplitBundle, load_pmid_list
    if getattr(args, "pmids", None):
        return load_pmid_list(args.pmids)
    return getattr(SplitBundle.load(args.splits), splits_attr or args.split)


def cmd_fetch(args):
    from .ingest import EutilsClient, fetch_articles, save_corpus, search_pmids
    client = EutilsClient(args.endpoint)
    pmids = search_pmids(args.descriptor, client, args.page_size)
    res = fetch_articles(pmids, client, args.batch_size, args.descriptor, args.state_dir)
    save_corpus(res.corpus, args.out)
    if args.manifest:
        Path(args.manifest).write_text(json.dumps(res.manifest(), indent=1) + "\n")
    print(f"{len(res.corpus)} articles, {len(res.missing)} missing, "
          f"{len(res.not_annotated)} not annotated, {res.requests} requests")


def cmd_import(args):
    from .recognizer import import_occurrences, save_occurrences
    occ = import_occurrences(args.occurrences, _corpus(args))
    save_occurrences(occ, args.out)
    print(f"{len(occ)} occurrences imported")


def cmd_annotate(args):
    from .recognizer import build_dictionary, load_auxiliary, recognize_corpus, save_occurrences
    from .thesaurus import load_thesaurus
    aux = load_auxiliary(args.auxiliary) if args.auxiliary else None
    dictionary = build_dictionary(load_thesaurus(args.thesaurus), args.granularity, aux)
    if args.dump_dictionary:
        Path(args.dump_dictionary).write_text(dictionary.dump())
    occ = recognize_corpus(_corpus(args), dictionary)
    save_occurrences(occ, args.out)
    print(f"{len(occ)} occurrences")


def cmd_weaklabel(args):
    from .recognizer import load_occurrences
    from .thesaurus import load_thesaurus
    from .weaklabel import assign_weak_labels, target_labels
    d = load_thesaurus(args.thesaurus)
    weak = assign_weak_labels(_corpus(args), load_occurrences(args.occurrences), d)
    weak.save(args.out)
    targets = target_labels(weak, d, args.min_support)
    if args.targets_out:
        Path(args.targets_out).write_text(json.dumps(targets) + "\n")
    print(json.dumps(weak.support()))


def cmd_split(args):
    from .datasets import SplitBundle, build_ws, split_ma1, split_ma2, save_pmid_list, \
        undersample_majority
    from .thesaurus import load_thesaurus
    d = load_thesaurus(args.thesaurus)
    weak = _weak(args.weak)
    pmids = list(weak.pmids)
    ma1 = split_ma1(pmids, args.ma1, args.seed)
    taken = set(ma1)
    ma2 = split_ma2([p for p in pmids if p not in taken], weak, d, args.ma2, args.seed)
    ws = build_ws(pmids, ma1, ma2, weak)
    SplitBundle(ma1, ma2, ws, args.seed).save(args.out)
    if args.undersample is not None:
        und = undersample_majority(ws, weak, d, args.undersample, args.undersample_seed)
        save_pmid_list(und, args.undersample_out)
    print(f"ma1={len(ma1)} ma2={len(ma2)} ws={len(ws)}")


def cmd_featurize(args):
    from .datasets import SplitBundle, load_pmid_list
    from .features import build_features
    from .recognizer import load_occurrences
    corpus = _corpus(args)
    occ = load_occurrences(args.occurrences)
    vocab = load_pmid_list(args.vocab_pmids) if args.vocab_pmids else \
        (SplitBundle.load(args.splits).ws if args.splits else corpus.pmids)
    keep = set(vocab)
    space, _ = build_features(corpus.subset(vocab), [o for o in occ if o.pmid in keep],
                              args.min_token_df)
    _, raw = build_features(corpus, occ, space=space)
    raw.save(args.out)
    print(f"{len(corpus)} articles x {len(space)} features")


def cmd_select(args):
    from .features import FeatureMatrix, SelectorConfig, selection_report
    from .pipeline import make_selection
    from .thesaurus import load_thesaurus
    d = load_thesaurus(args.thesaurus)
    raw = FeatureMatrix.load(args.features)
    weak = _weak(args.weak)
    train_pm = _pmids(args, "ws")
    cfg = SelectorConfig(args.method, args.k, args.exclude_ct, args.lexical_only, args.scope)
    sel, scores = make_selection(raw, weak, train_pm, _targets(args, weak, d), cfg, d)
    Path(args.out).write_text(json.dumps(sel.to_json()) + "\n")
    if args.report:
        Path(args.report).write_text(selection_report(scores, sel.feature_ids, raw.space))
    print(f"{len(sel.feature_ids)} features selected")


def _selection(path):
    from .pipeline import Selection
    return Selection.from_json(json.loads(Path(path).read_text()))


def _train_config(args):
    from .learn import TrainConfig
    return TrainConfig(args.classifier, args.penalty, args.C, max_depth=args.max_depth,
                       min_leaf=args.min_leaf, n_trees=args.n_trees, seed=args.seed,
                       max_iters=args.max_iters, tol=args.tol)


def cmd_train(args):
    from .features import FeatureMatrix
    from .learn import train
    raw = FeatureMatrix.load(args.features)
    sel = _selection(args.selection)
    weak = _weak(args.weak)
    train_pm = _pmids(args, "ws")
    targets = json.loads(Path(args.targets).read_text()) if args.targets else \
        [t for t in weak.label_ids if weak.rows(train_pm).column(t).any()]
    model = train(sel.matrix(raw, train_pm), weak.rows(train_pm), targets, _train_config(args),
                  args.workers)
    model.save(args.out)
    for w in model.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"trained {len(model.label_ids)} labels")


def cmd_predict(args):
    from .features import FeatureMatrix
    from .learn import OvrModel, predict
    raw = FeatureMatrix.load(args.features)
    sel = _selection(args.selection)
    pred = predict(OvrModel.load(args.model), sel.matrix(raw, _pmids(args)))
    pred.save(args.out)
    print(f"{len(pred.pmids)} articles predicted")


def cmd_baseline(args):
    from .evalkit import baseline_predict
    from .recognizer import Granularity, build_dictionary
    from .thesaurus import load_thesaurus
    d = load_thesaurus(args.thesaurus)
    weak = _weak(args.weak)
    corpus = _corpus(args).subset(_pmids(args))
    dicts = {g: build_dictionary(d, g) for g in Granularity}
    pred = baseline_predict(args.kind, corpus, weak, _targets(args, weak, d), d, dicts, args.seed)
    pred.save(args.out)
    print(f"{args.kind}: {len(pred.pmids)} articles")


def cmd_evaluate(args):
    from .evalkit import evaluate, kappa, metrics_csv
    from .weaklabel import LabelKind, LabelMatrix
    pred = LabelMatrix.load(args.pred, LabelKind.PREDICTED)
    golden = LabelMatrix.load(args.golden, LabelKind.GOLDEN)
    targets = json.loads(Path(args.targets).read_text()) if args.targets else list(pred.label_ids)
    golden = golden.align(pred.pmids, targets)
    if args.kappa:
        res = kappa(pred, golden, targets)
        text = json.dumps({"per_label": res.per_label, "macro_kappa": res.macro_kappa,
                           "degenerate": res.degenerate}, indent=1) + "\n"
    else:
        per, macro = evaluate(pred, golden, targets)
        text = metrics_csv(per, macro)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_cv(args):
    from .features import FeatureMatrix
    from .pipeline import cross_validate
    raw = FeatureMatrix.load(args.features)
    sel = _selection(args.selection)
    weak = _weak(args.weak)
    train_pm = _pmids(args, "ws")
    targets = json.loads(Path(args.targets).read_text()) if args.targets else \
        [t for t in weak.label_ids if weak.rows(train_pm).column(t).any()]
    _, macro = cross_validate(raw, weak, train_pm, targets, sel, _train_config(args), args.k,
                              args.cv_seed)
    print(f"{args.k}-fold macro-F1 {macro:.6f}")


def cmd_relabel(args):
    from .features import FeatureMatrix
    from .learn import OvrModel, relabel_and_retrain
    raw = FeatureMatrix.load(args.features)
    sel = _selection(args.selection)
    weak = _weak(args.weak)
    train_pm = _pmids(args, "ws")
    model = OvrModel.load(args.model)
    res = relabel_and_retrain(model, sel.matrix(raw, train_pm), weak.rows(train_pm), model.config)
    res.retrained.save(args.out)
    if args.labels_out:
        res.relabeled.save(args.labels_out)
    print(f"retrained {len(res.retrained.label_ids)} labels, skipped {res.skipped}")


def cmd_run(args):
    from .pipeline import PipelineConfig, run
    cfg = PipelineConfig.load(args.config)
    if args.output_dir:
        cfg.output_dir = Path(args.output_dir).resolve()
    if args.workers:
        cfg.workers = args.workers
    manifest = run(cfg)
    counts = {}
    for s in manifest.stages:
        counts[s.status] = counts.get(s.status, 0) + 1
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{len(manifest.stages)} stages ({', '.join(f'{v} {k}' for k, v in sorted(counts.items()))}); "
          f"reports in {cfg.output_dir / 'reports'}")


def cmd_synth(args):
    from .ingest import save_corpus
    from .synthetic import SyntheticSpec, generate_synthetic
    from .thesaurus import save_thesaurus
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.bundled:
        src = resources.files("weakindex") / "data" / "synthetic200"
        for name in ("corpus.jsonl", "golden.csv", "thesaurus.json", "config.json"):
            with resources.as_file(src / name) as p:
                shutil.copyfile(p, out / name)
        print(f"bundled synthetic corpus copied to {out}")
        return
    spec = SyntheticSpec(n_articles=args.n, miss_rate=args.miss_rate,
                         spurious_rate=args.spurious_rate, seed=args.seed)
    corpus, golden, descriptor = generate_synthetic(spec)
    save_corpus(corpus, out / "corpus.jsonl")
    golden.save(out / "golden.csv")
    save_thesaurus(descriptor, out / "thesaurus.json")
    (out / "spec.json").write_text(json.dumps(spec.to_json(), indent=1) + "\n")
    print(f"{len(corpus)} synthetic articles written to {out}")


def _add_train_options(p):
    p.add_argument("--classifier", default="logreg",
                   choices=["logreg", "linear_svm", "decision_tree", "random_forest"])
    p.add_argument("--penalty", default="l2", choices=["l1", "l2"])
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakindex", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        return p

    p = add("fetch", cmd_fetch, "retrieve articles annotated with a descriptor")
    p.add_argument("--descriptor", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint", default="https://eutils.ncbi.nlm.nih.gov/entrez/eutils/")
    p.add_argument("--page-size", type=int, default=10000)
    p.add_argument("--batch-size", type=int, default=200)
    p.add_argument("--state-dir")
    p.add_argument("--manifest")

    p = add("import", cmd_import, "validate externally produced concept occurrences")
    p.add_argument("--corpus", required=True)
    p.add_argument("--occurrences", required=True)
    p.add_argument("--out", required=True)

    p = add("annotate", cmd_annotate, "recognize concept occurrences with the dictionary")
    p.add_argument("--thesaurus", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--granularity", default="term", choices=["term", "token"])
    p.add_argument("--auxiliary")
    p.add_argument("--dump-dictionary")
    p.add_argument("--out", required=True)

    p = add("weaklabel", cmd_weaklabel, "derive weak labels from occurrences")
    p.add_argument("--thesaurus", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--occurrences", required=True)
    p.add_argument("--min-support", type=int, default=1)
    p.add_argument("--targets-out")
    p.add_argument("--out", required=True)

    p = add("split", cmd_split, "build the MA1, MA2 and WS splits")
    p.add_argument("--thesaurus", required=True)
    p.add_argument("--weak", required=True)
    p.add_argument("--ma1", type=int, required=True)
    p.add_argument("--ma2", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--undersample", type=int)
    p.add_argument("--undersample-seed", type=int, default=0)
    p.add_argument("--undersample-out", default="ws_und.txt")
    p.add_argument("--out", required=True)

    p = add("featurize", cmd_featurize, "build the raw lexical and semantic feature matrix")
    p.add_argument("--corpus", required=True)
    p.add_argument("--occurrences", required=True)
    p.add_argument("--splits", help="vocabulary comes from the WS split")
    p.add_argument("--vocab-pmids", help="file of pmids the vocabulary comes from")
    p.add_argument("--min-token-df", type=int, default=2)
    p.add_argument("--out", required=True)

    p = add("select", cmd_select, "score features and keep the top k")
    p.add_argument("--thesaurus", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--weak", required=True)
    p.add_argument("--splits")
    p.add_argument("--pmids", help="training pmids (default: the WS split)")
    p.add_argument("--targets")
    p.add_argument("--method", default="anova_f", choices=["chi2", "anova_f"])
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--exclude-ct", action="store_true")
    p.add_argument("--lexical-only", action="store_true")
    p.add_argument("--scope", default="shared", choices=["shared", "per_label"])
    p.add_argument("--report")
    p.add_argument("--out", required=True)

    for name, func, help_ in (("train", cmd_train, "train one-vs-rest classifiers"),
                              ("cv", cmd_cv, "k-fold cross-validation against weak labels"),
                              ("relabel", cmd_relabel, "relabel the training set and retrain")):
        p = add(name, func, help_)
        p.add_argument("--features", required=True)
        p.add_argument("--selection", required=True)
        p.add_argument("--weak", required=True)
        p.add_argument("--splits")
        p.add_argument("--pmids")
        p.add_argument("--targets")
        if name == "relabel":
            p.add_argument("--model", required=True)
            p.add_argument("--labels-out")
            p.add_argument("--out", required=True)
            continue
        _add_train_options(p)
        if name == "train":
            p.add_argument("--workers", type=int, default=1)
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--k", type=int, default=5)
            p.add_argument("--cv-seed", type=int, required=True)

    p = add("predict", cmd_predict, "apply a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--splits")
    p.add_argument("--split", default="ma1", choices=["ma1", "ma2", "ws"])
    p.add_argument("--pmids")
    p.add_argument("--out", required=True)

    p = add("baseline", cmd_baseline, "predictions of a baseline annotator")
    p.add_argument("--kind", required=True,
                   choices=["AllAll", "Random", "WSLabels", "WSRestAll", "AllM", "WSRestM",
                            "DTerms", "DTokens"])
    p.add_argument("--thesaurus", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--weak", required=True)
    p.add_argument("--splits")
    p.add_argument("--split", default="ma1", choices=["ma1", "ma2", "ws"])
    p.add_argument("--pmids")
    p.add_argument("--targets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "per-label and macro metrics against golden labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--golden", required=True)
    p.add_argument("--targets")
    p.add_argument("--kappa", action="store_true", help="report Cohen's kappa instead of F1")
    p.add_argument("--out")

    p = add("run", cmd_run, "execute a full configured experiment")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)

    p = add("synth", cmd_synth, "write a synthetic corpus with golden labels")
    p.add_argument("--out", required=True)
    p.add_argument("--bundled", action="store_true", help="copy the bundled 200-article corpus")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--miss-rate", type=float, default=0.3)
    p.add_argument("--spurious-rate", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure maps to a tagged exit
        stage = getattr(e, "stage", args.command)
        msg = str(e)
        prefix = f"[{stage}] "
        if msg.startswith(prefix):
            msg = msg[len(prefix):]
        print(f"weakindex {stage}: {type(e).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
