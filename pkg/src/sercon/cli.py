"""Command-line interface.

Subcommands wire the library into reproducible experiments:

    sercon synth            write a synthetic corpus (manifest + EMB1)
    sercon augment IN OUT   apply one augmentation spec to a WAV file
    sercon train            fine-tune the head on one or all folds
    sercon build-datastore  embed train+val samples into a DST1 file
    sercon infer            kNN-interpolated evaluation of one fold
    sercon evaluate         bare-model evaluation of one fold
    sercon run-all          full staged protocol + aggregate reports

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import corpus as corpus_mod
from . import encoder, inference, retrieval, trainer
from .augment import apply_augment, load_wav, save_wav
from .config import RunConfig, apply_overrides, load_config, serialize_config
from .errors import ConfigError, DataError, NumericsError
from .rng import child_seed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="sercon", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="key=value config file")
        p.add_argument("--set", dest="sets", metavar="KEY=VALUE", action="append", default=[],
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, metavar="N", help="root seed (overrides run.seed and synth.seed)")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides run.out_dir)")

    common(sub.add_parser("synth", help="generate a synthetic corpus"))

    p = sub.add_parser("augment", help="augment a WAV file")
    p.add_argument("input", metavar="IN.wav")
    p.add_argument("output", metavar="OUT.wav")
    common(p)

    for name, help_text in (
        ("train", "train the classifier head"),
        ("build-datastore", "embed train+val samples into a datastore"),
        ("infer", "evaluate with kNN interpolation"),
        ("evaluate", "evaluate the bare model"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--fold", type=int, default=None if name == "train" else 0,
                       help="fold index (train default: all folds)")
        if name in ("build-datastore", "infer", "evaluate"):
            p.add_argument("--checkpoint", metavar="PATH", help="HDP1 checkpoint (default: train output path)")
        if name == "infer":
            p.add_argument("--datastore", metavar="PATH", help="DST1 datastore (default: build-datastore output path)")
        common(p)

    p = sub.add_parser("run-all", help="full staged protocol")
    common(p)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.sets:
        cfg = apply_overrides(cfg, args.sets)
    extra = []
    if args.seed is not None:
        extra += [f"run.seed={args.seed}", f"synth.seed={args.seed}"]
    if args.out is not None:
        extra.append(f"run.out_dir={args.out}")
    if extra:
        cfg = apply_overrides(cfg, extra)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus_paths(cfg: RunConfig) -> tuple[Path, Path]:
    out = Path(cfg.out_dir)
    manifest = Path(cfg.manifest) if cfg.manifest else out / "synthetic.manifest.tsv"
    embeddings = Path(cfg.embeddings) if cfg.embeddings else out / "synthetic.emb1"
    return manifest, embeddings


def _load_corpus(cfg: RunConfig) -> corpus_mod.Corpus:
    manifest, embeddings = _corpus_paths(cfg)
    return corpus_mod.load_corpus(manifest, embeddings)


def _folds(cfg: RunConfig, corpus: corpus_mod.Corpus) -> list[corpus_mod.FoldSpec]:
    return corpus_mod.make_folds(corpus, cfg.n_folds)


def _fold_train_config(cfg: RunConfig, fold_index: int) -> trainer.TrainConfig:
    return replace(cfg.train, seed=child_seed(cfg.seed, "fold", fold_index))


def _pipeline_options(cfg: RunConfig) -> inference.PipelineOptions:
    return inference.PipelineOptions(
        weighting=cfg.retrieval_weighting,
        beta=cfg.retrieval_beta,
        k_range=cfg.k_range(),
        alpha_grid=cfg.alpha_grid(),
        metric=cfg.select_metric,
        aggregate=cfg.aggregate,
        fixed_k=cfg.fixed_k,
        fixed_alpha=cfg.fixed_alpha,
    )


def _augment_flags(cfg: RunConfig) -> dict:
    spec = cfg.train.augment
    flags = {"kind": spec.kind, "embedding_space": spec.embedding_space}
    if spec.embedding_space:
        flags["note"] = (
            "views generated by Gaussian jitter in embedding space; "
            "no waveform-level augmentation was applied"
        )
    return flags


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_log(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _checkpoint_path(out: Path, fold_index: int) -> Path:
    return out / "checkpoints" / f"fold{fold_index}.hdp1"


def _datastore_path(out: Path, fold_index: int) -> Path:
    return out / "datastores" / f"fold{fold_index}.dst1"


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    embeddings, manifest = corpus_mod.generate_synthetic_corpus(cfg.synth)
    manifest_path, emb_path = _corpus_paths(cfg)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    emb_path.parent.mkdir(parents=True, exist_ok=True)
    corpus_mod.save_manifest(manifest_path, manifest)
    corpus_mod.save_embeddings(emb_path, embeddings)
    (out / "synth.config").write_text(serialize_config(cfg), encoding="utf-8")
    print(f"wrote {manifest_path} ({len(manifest)} utterances)")
    print(f"wrote {emb_path} (dim {embeddings[0].dim})")
    return EXIT_OK


def cmd_augment(cfg: RunConfig, input_path: str, output_path: str) -> int:
    w = load_wav(input_path)
    out = apply_augment(w, cfg.train.augment, seed=cfg.seed)
    save_wav(output_path, out)
    print(f"wrote {output_path} ({out.samples.size} samples @ {out.sample_rate} Hz)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, fold_index: int | None) -> int:
    out = _out_dir(cfg)
    corpus = _load_corpus(cfg)
    folds = _folds(cfg, corpus)
    targets = folds if fold_index is None else [folds[_check_fold(fold_index, folds)]]
    for fold in targets:
        train, val, _ = corpus_mod.split_by_fold(corpus, fold)
        params, log = trainer.train_fold(train, val, _fold_train_config(cfg, fold.fold_index), corpus.n_classes)
        ckpt = _checkpoint_path(out, fold.fold_index)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        encoder.save_checkpoint(ckpt, params)
        _write_log(out / "logs" / f"fold{fold.fold_index}.jsonl", log)
        print(f"fold {fold.fold_index}: best val loss {min(r['val_loss'] for r in log):.6f} -> {ckpt}"
              if log else f"fold {fold.fold_index}: no epochs run -> {ckpt}")
    return EXIT_OK


def _check_fold(fold_index: int, folds: list) -> int:
    if not (0 <= fold_index < len(folds)):
        raise ConfigError(f"--fold must lie in [0, {len(folds) - 1}], got {fold_index}")
    return fold_index


def cmd_build_datastore(cfg: RunConfig, fold_index: int, checkpoint: str | None) -> int:
    out = _out_dir(cfg)
    corpus = _load_corpus(cfg)
    folds = _folds(cfg, corpus)
    fold = folds[_check_fold(fold_index, folds)]
    ckpt_path = Path(checkpoint) if checkpoint else _checkpoint_path(out, fold_index)
    params = encoder.load_checkpoint(ckpt_path)
    train, val, _ = corpus_mod.split_by_fold(corpus, fold)
    ds = retrieval.build_datastore(params, train, val, corpus.n_classes)
    ds_path = _datastore_path(out, fold_index)
    ds_path.parent.mkdir(parents=True, exist_ok=True)
    retrieval.save_datastore(ds_path, ds)
    print(f"wrote {ds_path} (M={ds.size}, H={ds.dim})")
    return EXIT_OK


def _single_fold_report(cfg: RunConfig, fold_index: int, checkpoint: str | None,
                        datastore: str | None, with_knn: bool) -> dict:
    out = _out_dir(cfg)
    corpus = _load_corpus(cfg)
    folds = _folds(cfg, corpus)
    fold = folds[_check_fold(fold_index, folds)]
    ckpt_path = Path(checkpoint) if checkpoint else _checkpoint_path(out, fold_index)
    params = encoder.load_checkpoint(ckpt_path)
    train, val, test = corpus_mod.split_by_fold(corpus, fold)

    if with_knn:
        if datastore:
            ds = retrieval.load_datastore(datastore)
        else:
            ds_path = _datastore_path(out, fold_index)
            ds = retrieval.load_datastore(ds_path) if ds_path.exists() else retrieval.build_datastore(
                params, train, val, corpus.n_classes)
        if ds.dim != params.hidden:
            raise DataError(f"datastore dim {ds.dim} does not match checkpoint hidden dim {params.hidden}")
        if cfg.fixed_k is not None and cfg.fixed_alpha is not None:
            k, alpha = cfg.fixed_k, cfg.fixed_alpha
        else:
            k, alpha = inference.search_hparams(
                params, ds, val,
                k_range=cfg.k_range(), alpha_grid=cfg.alpha_grid(),
                weighting=cfg.retrieval_weighting, beta=cfg.retrieval_beta,
                metric=cfg.select_metric, exclude_offset=len(train),
            )
        report, _ = inference.evaluate_with_knn(
            params, ds, test, k, alpha, cfg.retrieval_weighting, cfg.retrieval_beta)
        report = replace(report, chosen_k=k, chosen_alpha=alpha, fold_index=fold_index)
    else:
        ds = retrieval.build_datastore(params, train, val, corpus.n_classes)
        report, _ = inference.evaluate_with_knn(params, ds, test, k=1, alpha=0.0)
        report = replace(report, fold_index=fold_index)

    doc = report.to_json_dict()
    doc["labels"] = list(corpus.label_names)
    doc["stage"] = "with_knn" if with_knn else "model_only"
    doc["augment"] = _augment_flags(cfg)
    return doc


def cmd_infer(cfg: RunConfig, fold_index: int, checkpoint: str | None, datastore: str | None) -> int:
    doc = _single_fold_report(cfg, fold_index, checkpoint, datastore, with_knn=True)
    out = _out_dir(cfg)
    path = out / "reports" / f"infer_fold{fold_index}.json"
    _write_json(path, doc)
    if cfg.figures:
        from .figures import render_report_figures

        render_report_figures(doc, out / "figures")
    print(f"wrote {path} (wa={doc['wa']:.4f}, ua={doc['ua']:.4f}, k={doc['chosen_k']}, alpha={doc['chosen_alpha']})")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, fold_index: int, checkpoint: str | None) -> int:
    doc = _single_fold_report(cfg, fold_index, checkpoint, None, with_knn=False)
    out = _out_dir(cfg)
    path = out / "reports" / f"evaluate_fold{fold_index}.json"
    _write_json(path, doc)
    if cfg.figures:
        from .figures import render_report_figures

        render_report_figures(doc, out / "figures")
    print(f"wrote {path} (wa={doc['wa']:.4f}, ua={doc['ua']:.4f})")
    return EXIT_OK


def _folds_csv(fold_results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fold", "stage", "wa", "ua", "k", "alpha"])
    for fr in fold_results:
        for stage in inference.STAGE_KEYS:
            rep = fr.reports[stage]
            writer.writerow([
                fr.fold_index,
                stage,
                repr(rep.wa),
                repr(rep.ua),
                "" if rep.chosen_k is None else rep.chosen_k,
                "" if rep.chosen_alpha is None else repr(rep.chosen_alpha),
            ])
    return buf.getvalue()


def cmd_run_all(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    corpus = _load_corpus(cfg)
    folds = _folds(cfg, corpus)
    seeds = [child_seed(cfg.seed, "fold", f.fold_index) for f in folds]
    report, fold_results = inference.run_pipeline(
        corpus, folds, cfg.train, _pipeline_options(cfg), per_fold_seeds=seeds
    )
    report["augment"] = _augment_flags(cfg)
    report["config_text"] = serialize_config(cfg)

    for result in fold_results:
        for tag in ("ce", "scl"):
            ckpt = out / "checkpoints" / f"fold{result.fold_index}_{tag}.hdp1"
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            encoder.save_checkpoint(ckpt, result.checkpoints[tag])
            ds_path = out / "datastores" / f"fold{result.fold_index}_{tag}.dst1"
            ds_path.parent.mkdir(parents=True, exist_ok=True)
            retrieval.save_datastore(ds_path, result.datastores[tag])
            _write_log(out / "logs" / f"fold{result.fold_index}_{tag}.jsonl", result.logs[tag])

    _write_json(out / "reports" / "aggregate.json", report)
    (out / "reports" / "folds.csv").write_text(_folds_csv(fold_results), encoding="utf-8")
    if cfg.figures:
        from .figures import render_report_figures

        render_report_figures(report, out / "figures")
    for stage in inference.STAGE_KEYS:
        rep = report["stages"][stage]
        print(f"{stage:<15} wa={rep['wa']:.4f} ua={rep['ua']:.4f}")
    print(f"wrote {out / 'reports' / 'aggregate.json'}")
    print(f"wrote {out / 'reports' / 'folds.csv'}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "augment":
            return cmd_augment(cfg, args.input, args.output)
        if args.command == "train":
            return cmd_train(cfg, args.fold)
        if args.command == "build-datastore":
            return cmd_build_datastore(cfg, args.fold, args.checkpoint)
        if args.command == "infer":
            return cmd_infer(cfg, args.fold, args.checkpoint, args.datastore)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.fold, args.checkpoint)
        if args.command == "run-all":
            return cmd_run_all(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
