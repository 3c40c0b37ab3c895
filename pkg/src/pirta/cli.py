"""``pirta`` command line: one verb per pipeline stage."""
from __future__ import annotations

import csv
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import click
import httpx
import torch

from .data import LABELS, DataError
from .encoder import NumericalError, checkpoint_exists, load_checkpoint, save_checkpoint
from .pipeline import (
    CONDITIONS,
    ConditionResult,
    ExperimentConfig,
    MissingArtifact,
    build_index,
    classifier_path,
    evaluate_condition,
    finetune,
    index_path,
    load_dataset,
    mae_path,
    make_dataset,
    manifest_path,
    oracle_reports,
    pretrain,
    query_features,
    retrieve,
    write_dataset,
    write_evaluation,
)
from .report import (
    EndpointConfig,
    LLMUnavailable,
    ReportParseError,
    llm_generate,
    render_finding,
    render_prompt,
    write_reports,
)
from .retrieval import index_exists, load_index, pca_2d, save_index, silhouette_score

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERICAL = 0, 1, 2, 3


@dataclasses.dataclass
class Ctx:
    cfg: ExperimentConfig
    force: bool


def _guard(path: Path, force: bool, what: str) -> None:
    if path.exists() and not force:
        raise click.UsageError(f"{what} already exists at {path}; pass --force to overwrite")


def _need_dataset(cfg):
    return load_dataset(cfg)


def _need_mae(cfg, condition):
    p = mae_path(cfg, condition)
    if not checkpoint_exists(p):
        raise MissingArtifact(f"{condition} MAE checkpoint", p, f"pretrain --condition {condition}")
    return load_checkpoint(p)


def _need_classifier(cfg, condition):
    p = classifier_path(cfg, condition)
    if not checkpoint_exists(p):
        raise MissingArtifact(f"{condition} classifier checkpoint", p, f"finetune --condition {condition}")
    return load_checkpoint(p)


def _need_index(cfg, condition):
    p = index_path(cfg, condition)
    if not index_exists(p):
        raise MissingArtifact("embedding index", p, f"build-index --condition {condition}")
    return load_index(p)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Experiment config JSON (defaults apply when omitted).")
@click.option("--seed", type=int, default=None, help="Override the experiment seed.")
@click.option("--force", is_flag=True, help="Overwrite existing outputs.")
@click.pass_context
def cli(ctx, config_path, seed, force):
    """Image retrieval and report augmentation on synthetic DWI/ADC phantoms."""
    torch.set_num_threads(1)
    if config_path is not None:
        if not Path(config_path).exists():
            raise click.UsageError(f"config file {config_path} does not exist")
        try:
            cfg = ExperimentConfig.load(config_path)
        except (ValueError, TypeError, json.JSONDecodeError) as e:
            raise click.UsageError(f"bad config {config_path}: {e}") from e
    else:
        cfg = ExperimentConfig()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    ctx.obj = Ctx(cfg, force)


@cli.command("dump-config")
@click.argument("path", type=click.Path(dir_okay=False), required=False)
@click.pass_obj
def dump_config(obj: Ctx, path):
    """Print (or write) the effective config."""
    if path is None:
        click.echo(json.dumps(obj.cfg.to_dict(), indent=2))
    else:
        _guard(Path(path), obj.force, "config")
        obj.cfg.save(path)


def count_table(records) -> str:
    rows = []
    header = f"{'Split':<10}{'Total':>7}{'Normal':>8}{'Anterior':>10}{'Deep gray':>11}{'Posterior':>11}"
    rows.append(header)
    rows.append("-" * len(header))
    for split in ("train", "test"):
        rs = [r for r in records if r.split == split]
        c = {l: sum(r.label is l for r in rs) for l in LABELS}
        rows.append(f"{split:<10}{len(rs):>7}{c[LABELS[3]]:>8}{c[LABELS[0]]:>10}{c[LABELS[1]]:>11}{c[LABELS[2]]:>11}")
    return "\n".join(rows)


@cli.command("gen-data")
@click.option("--counts", default=None,
              help="Per-class count, 'N' for both splits or 'TRAIN,TEST'.")
@click.pass_obj
def gen_data(obj: Ctx, counts):
    """Generate phantoms and write the manifest."""
    cfg = obj.cfg
    if counts is not None:
        try:
            parts = [int(p) for p in counts.split(",")]
        except ValueError:
            raise click.BadParameter("expected N or TRAIN,TEST", param_hint="--counts")
        if len(parts) == 1:
            parts *= 2
        if len(parts) != 2 or min(parts) < 0:
            raise click.BadParameter("expected N or TRAIN,TEST with non-negative integers", param_hint="--counts")
        cfg = dataclasses.replace(cfg, train_per_class=parts[0], test_per_class=parts[1])
    _guard(manifest_path(cfg), obj.force, "manifest")
    records = make_dataset(cfg)
    path = write_dataset(cfg, records)
    click.echo(count_table(records))
    if not records:
        click.echo("warning: all counts are zero; wrote an empty manifest", err=True)
    elif cfg.train_per_class == 0 or cfg.test_per_class == 0:
        click.echo("warning: one split has zero records", err=True)
    click.echo(f"wrote {len(records)} records to {path}")


@cli.command("pretrain")
@click.option("--condition", type=click.Choice(["small", "large"]), default="large", show_default=True)
@click.pass_obj
def pretrain_cmd(obj: Ctx, condition):
    """MAE pretraining on the small or large unlabeled pool."""
    cfg = obj.cfg
    out = mae_path(cfg, condition)
    _guard(Path(str(out) + ".json"), obj.force, "checkpoint")
    train, _ = _need_dataset(cfg)
    ckpt, curve = pretrain(cfg, condition, train, log_path=Path(str(out) + ".log.jsonl"))
    save_checkpoint(ckpt, out)
    click.echo(f"mae[{condition}] loss {curve[0]:.4f} -> {curve[-1]:.4f}; saved {out}")


@cli.command("finetune")
@click.option("--condition", type=click.Choice(CONDITIONS), default="large", show_default=True)
@click.pass_obj
def finetune_cmd(obj: Ctx, condition):
    """Fine-tune encoder + territory head on the labeled train split."""
    cfg = obj.cfg
    out = classifier_path(cfg, condition)
    _guard(Path(str(out) + ".json"), obj.force, "checkpoint")
    train, _ = _need_dataset(cfg)
    mae = None if condition == "no" else _need_mae(cfg, condition)
    ckpt, hist = finetune(cfg, condition, train, mae, log_path=Path(str(out) + ".log.jsonl"))
    save_checkpoint(ckpt, out)
    click.echo(f"classifier[{condition}] final loss {hist[-1]['loss']:.4f} train acc {hist[-1]['acc']:.3f}; saved {out}")


@cli.command("build-index")
@click.option("--condition", type=click.Choice(CONDITIONS), default=None,
              help="Encoder to use (defaults to the primary condition).")
@click.pass_obj
def build_index_cmd(obj: Ctx, condition):
    """Embed the train split and write the retrieval database."""
    cfg = obj.cfg
    condition = condition or cfg.primary_condition
    out = index_path(cfg, condition)
    _guard(Path(str(out) + ".json"), obj.force, "index")
    train, _ = _need_dataset(cfg)
    ckpt = _need_classifier(cfg, condition)
    idx = build_index(train, ckpt, cfg)
    save_index(idx, out, extra={"condition": condition})
    click.echo(f"indexed {len(idx)} records (dim {idx.feature_dim}) at {out}")


def _test_record(test, query_id):
    by_id = {r.id: r for r in test}
    if query_id not in by_id:
        raise click.BadParameter(f"no test record with id {query_id!r}", param_hint="--query")
    return by_id[query_id]


@cli.command("retrieve")
@click.option("--query", "query_id", required=True, help="Test record id.")
@click.option("-k", "k", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--condition", type=click.Choice(CONDITIONS), default=None)
@click.pass_obj
def retrieve_cmd(obj: Ctx, query_id, k, condition):
    """Print the top-k most similar train records for one test query."""
    cfg = obj.cfg
    condition = condition or cfg.primary_condition
    _, test = _need_dataset(cfg)
    rec = _test_record(test, query_id)
    idx = _need_index(cfg, condition)
    ckpt = _need_classifier(cfg, condition)
    feats = query_features([rec], ckpt, cfg)
    res = retrieve(idx, [rec], feats, min(k, len(idx)))[0]
    click.echo(f"query {rec.id} ({rec.label.value})")
    for rank, h in enumerate(res.hits, 1):
        text = render_finding(h.finding) if h.finding is not None else h.label.value
        click.echo(f"[{rank}] {h.id}  {h.similarity:.2f}  {text}")


@cli.command("generate")
@click.option("--query", "query_ids", multiple=True, help="Test record id(s); default all test records.")
@click.option("--condition", type=click.Choice(CONDITIONS), default=None)
@click.option("--llm-url", default=None, help="Text-completion endpoint; the oracle generator is used when omitted.")
@click.option("--llm-model", default="llama3-8b-instruct", show_default=True)
@click.option("--llm-token-env", default="PIRTA_LLM_TOKEN", show_default=True)
@click.option("--llm-timeout", type=float, default=60.0, show_default=True)
@click.pass_obj
def generate_cmd(obj: Ctx, query_ids, condition, llm_url, llm_model, llm_token_env, llm_timeout):
    """Retrieve top-m neighbours and write augmented reports."""
    cfg = obj.cfg
    condition = condition or cfg.primary_condition
    out_dir = Path(cfg.paths.output_dir) / f"reports_{condition}"
    _guard(out_dir / "reports.jsonl", obj.force, "reports")
    _, test = _need_dataset(cfg)
    recs = [_test_record(test, q) for q in query_ids] if query_ids else test
    idx = _need_index(cfg, condition)
    ckpt = _need_classifier(cfg, condition)
    results = retrieve(idx, recs, query_features(recs, ckpt, cfg), cfg.m)
    if llm_url is None:
        reports = oracle_reports(results, recs, cfg.m)
    else:
        ep = EndpointConfig(url=llm_url, model=llm_model, token_env=llm_token_env, timeout=llm_timeout)
        reports = []
        for res, rec in zip(results, recs):
            try:
                reports.append(llm_generate(render_prompt(rec.registry, res, cfg.m), ep))
            except ReportParseError as e:
                raise click.ClickException(f"{rec.id}: unparseable LLM output: {e}") from e
    write_reports(zip([r.id for r in recs], reports), out_dir / "reports.jsonl", out_dir / "text")
    click.echo(f"wrote {len(reports)} reports to {out_dir}")


@cli.command("evaluate")
@click.option("--ks", default=None, help="Comma-separated k list (default from config).")
@click.option("--conditions", default=None, help="Comma-separated subset of no,small,large.")
@click.pass_obj
def evaluate_cmd(obj: Ctx, ks, conditions):
    """Retrieval, classification and report-territory tables per pretrain condition."""
    cfg = obj.cfg
    if ks is not None:
        try:
            cfg = dataclasses.replace(cfg, ks=tuple(int(k) for k in ks.split(",")))
        except ValueError:
            raise click.BadParameter("expected integers", param_hint="--ks")
        if min(cfg.ks) < 1:
            raise click.BadParameter("k must be >= 1", param_hint="--ks")
    conds = tuple(conditions.split(",")) if conditions else cfg.conditions
    for c in conds:
        if c not in CONDITIONS:
            raise click.BadParameter(f"unknown condition {c!r}", param_hint="--conditions")
    out = Path(cfg.paths.output_dir)
    _guard(out / "summary.json", obj.force, "evaluation summary")
    train, test = _need_dataset(cfg)
    if not train or not test:
        raise click.UsageError("evaluation needs non-empty train and test splits")
    results: dict[str, ConditionResult] = {}
    for c in conds:
        ckpt = _need_classifier(cfg, c)
        res = evaluate_condition(cfg, c, ckpt, train, test)
        if c != "no" and checkpoint_exists(mae_path(cfg, c)):
            res.mae_curve = load_checkpoint(mae_path(cfg, c)).meta.get("loss_curve", [])
        results[c] = res
    paths = write_evaluation(results, out, cfg.ks, extra={"seed": cfg.seed, "ks": list(cfg.ks), "m": cfg.m})
    for c, r in results.items():
        cells = "  ".join(f"{k} {v:.4f}" for k, v in r.retrieval.items())
        click.echo(f"{c:<6} {cells}  cls {r.classification['Multi class Acc@1']:.4f}  report {r.report_acc1:.4f}")
    click.echo("wrote " + ", ".join(str(p) for p in paths.values()))


@cli.command("export-embeddings")
@click.option("--condition", type=click.Choice(CONDITIONS), default=None)
@click.pass_obj
def export_embeddings_cmd(obj: Ctx, condition):
    """PCA-2D projection of the index plus its silhouette score."""
    cfg = obj.cfg
    condition = condition or cfg.primary_condition
    out = Path(cfg.paths.output_dir) / f"embeddings_{condition}.csv"
    _guard(out, obj.force, "embedding export")
    idx = _need_index(cfg, condition)
    if len(idx) == 0:
        raise click.UsageError("cannot export an empty index")
    xy = pca_2d(idx.features)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "pc1", "pc2"])
        for rid, label, (a, b) in zip(idx.ids, idx.labels, xy):
            w.writerow([rid, label.value, f"{a:.6f}", f"{b:.6f}"])
    sil = silhouette_score(idx.features, idx.labels)
    Path(str(out)[:-4] + ".json").write_text(json.dumps({"condition": condition, "n": len(idx), "silhouette": sil}) + "\n")
    click.echo(f"silhouette[{condition}] = {sil:.4f}; wrote {len(idx)} rows to {out}")


def main(argv: Optional[list[str]] = None) -> int:
    try:
        cli.main(args=argv, prog_name="pirta", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except MissingArtifact as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_MISSING
    except NumericalError as e:
        click.echo(f"numerical failure: {e}", err=True)
        return EXIT_NUMERICAL
    except (DataError, LLMUnavailable, httpx.HTTPStatusError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_USAGE
    return EXIT_OK


def run() -> None:
    sys.exit(main())
