"""Command-line driver: each subcommand is one pipeline stage over files in ``--out-dir``.

Every stage writes ``manifests/<stage>.json`` with the resolved-config hash, the
seed, sha256 checksums of its inputs and outputs. A later stage refuses to run
when an input is missing or no longer matches the checksum its producer recorded.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from . import __version__
from .climate_index import compute_monthly_indices
from .encoders import TokenVocab
from .explain import FusionExplainer, factor_attribution, per_factor_ablation, sample_background, select_uncertain_cases
from .features import FeaturePlan
from .metrics import bootstrap_summary, report_rows, spearman_matrix
from .panel import build_panels
from .pipeline import assemble_dataset, prepare_dataset
from .synth import CATEGORICAL_FEATURES, DEFAULT_BETAS, GenSpec, generate
from .trainer import (
    FusionModel,
    ModalityMask,
    ModelConfig,
    SplitPlan,
    grid_search,
    hybrid_freeze_train,
    search_grid,
    train,
)

logger = logging.getLogger("climacredit")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


class ArtifactError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------------

MODEL_FIELDS = {f.name for f in fields(ModelConfig)} - {"mask", "encoder", "seed"}

DEFAULTS = {
    "seed": 0,
    "seeds": [0, 1, 2, 3, 4],
    "generate": {
        "n_loans": 4000,
        "default_rate": 0.05,
        "n_stations": 40,
        "climatology_years": [2001, 2020],
        "loan_window": ["2022-01", "2023-12"],
        "betas": {},
        "text_rho": 0.3,
        "missing_rate": 0.02,
    },
    "features": {"n_bins": 5, "iv_min": 0.01, "iv_max": 0.5, "vif_limit": 10.0, "max_seq_len": 326},
    "train": {
        "masks": ["S", "C", "T", "S+C", "S+C+T"],
        "encoders": ["TRANSFORMER"],
        "grid": False,
        "hybrid": False,
        "model": {"hidden_size": 16, "num_layers": 1, "heads": 2, "ff_dim": 32, "text_embed_dim": 16, "max_epochs": 20, "patience": 5},
    },
    "evaluate": {"resamples": 1000, "master_seed": 0},
    "explain": {"encoder": "TRANSFORMER", "mask": "S+C+T", "cases": 20, "background": 100, "budget": 2048},
    "correlate": {"encoder": "TRANSFORMER", "per_factor": False, "resamples": 1000},
}

_num = {"type": "number"}
_int = {"type": "integer"}
_pos = {"type": "integer", "minimum": 1}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


_model_props = {
    "hidden_size": _pos,
    "num_layers": _pos,
    "heads": _pos,
    "ff_dim": _pos,
    "text_embed_dim": _pos,
    "max_seq_len": _pos,
    "mlp_hidden": _pos,
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "batch_size": _pos,
    "max_epochs": _pos,
    "patience": {"type": "integer", "minimum": 0},
    "pos_weight": {"type": ["number", "null"]},
}

CONFIG_SCHEMA = _obj(
    {
        "seed": _int,
        "seeds": {"type": "array", "items": _int, "minItems": 1},
        "generate": _obj(
            {
                "n_loans": _pos,
                "default_rate": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "n_stations": _pos,
                "climatology_years": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2},
                "loan_window": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
                "betas": {
                    "type": "object",
                    "properties": {k: _num for k in ("struct", "wlr", "drought", "ht", "cf", "text")},
                    "additionalProperties": False,
                },
                "text_rho": {"type": "number", "minimum": -1, "maximum": 1},
                "missing_rate": {"type": "number", "minimum": 0, "maximum": 1},
            }
        ),
        "features": _obj({"n_bins": _pos, "iv_min": _num, "iv_max": _num, "vif_limit": _num, "max_seq_len": _pos}),
        "train": _obj(
            {
                "masks": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "encoders": {"type": "array", "items": {"enum": ["LSTM", "GRU", "TRANSFORMER"]}, "minItems": 1},
                "grid": {"type": "boolean"},
                "hybrid": {"type": "boolean"},
                "model": _obj(_model_props),
            }
        ),
        "evaluate": _obj({"resamples": _pos, "master_seed": _int}),
        "explain": _obj(
            {
                "encoder": {"enum": ["LSTM", "GRU", "TRANSFORMER"]},
                "mask": {"type": "string"},
                "cases": _pos,
                "background": _pos,
                "budget": _pos,
            }
        ),
        "correlate": _obj({"encoder": {"enum": ["LSTM", "GRU", "TRANSFORMER"]}, "per_factor": {"type": "boolean"}, "resamples": _pos}),
    }
)


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "betas":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def resolve_config(path, args) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    jsonschema.validate(user, CONFIG_SCHEMA)
    cfg = _merge(DEFAULTS, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["seeds"] = [args.seed]
    if getattr(args, "modality", None):
        cfg["train"]["masks"] = [ModalityMask.parse(m).code for m in args.modality]
    if getattr(args, "encoder", None):
        cfg["train"]["encoders"] = [e.upper() for e in args.encoder]
    for name in MODEL_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            cfg["train"]["model"][name] = value
    for key in ("n_loans", "default_rate", "n_stations"):
        value = getattr(args, key, None)
        if value is not None:
            cfg["generate"][key] = value
    if getattr(args, "resamples", None) is not None:
        cfg["evaluate"]["resamples"] = args.resamples
        cfg["correlate"]["resamples"] = args.resamples
    jsonschema.validate(cfg, CONFIG_SCHEMA)
    for code in cfg["train"]["masks"] + [cfg["explain"]["mask"]]:
        ModalityMask.parse(code)
    return cfg


# -- artifact bookkeeping --------------------------------------------------------------


def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Workspace:
    def __init__(self, root, cfg: dict):
        self.root = Path(root)
        self.cfg = cfg
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def path(self, rel: str) -> Path:
        return self.root / rel

    def recorded(self) -> dict[str, tuple[str, str]]:
        """rel path -> (producer stage, sha256) over every manifest on disk."""
        out = {}
        mdir = self.root / "manifests"
        if mdir.is_dir():
            for mf in sorted(mdir.glob("*.json")):
                doc = json.loads(mf.read_text())
                for rel, digest in doc.get("outputs", {}).items():
                    out[rel] = (doc["stage"], digest)
        return out

    def require(self, *rels: str) -> None:
        known = self.recorded()
        for rel in rels:
            p = self.path(rel)
            stage, expected = known.get(rel, (None, None))
            if not p.is_file():
                hint = f" (expected sha256 {expected} from stage {stage})" if expected else ""
                raise ArtifactError(f"missing artifact {rel}{hint}")
            actual = sha256_of(p)
            if expected is not None and actual != expected:
                raise ArtifactError(f"stale artifact {rel}: stage {stage} recorded sha256 {expected}, file has sha256 {actual}")
            self.inputs[rel] = actual

    def write_csv(self, rel: str, frame: pd.DataFrame, **kw) -> None:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(p, index=kw.pop("index", False), lineterminator="\n", **kw)
        self.outputs.append(rel)

    def write_text(self, rel: str, text: str) -> None:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        self.outputs.append(rel)

    def write_json(self, rel: str, doc) -> None:
        self.write_text(rel, json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def finish(self, stage: str, seed, extra: dict | None = None) -> dict:
        manifest = {
            "stage": stage,
            "version": __version__,
            "config_hash": hashlib.sha256(canonical(self.cfg)).hexdigest(),
            "seed": seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {rel: sha256_of(self.path(rel)) for rel in sorted(set(self.outputs))},
        }
        if extra:
            manifest.update(extra)
        p = self.path(f"manifests/{stage}.json")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return manifest


# -- file formats ------------------------------------------------------------------------


def read_loans(path: Path) -> pd.DataFrame:
    header = pd.read_csv(path, nrows=0).columns
    text_cols = {"loan_id", "start_date"} | (set(CATEGORICAL_FEATURES) & set(header))
    return pd.read_csv(path, dtype={c: str for c in text_cols})


def read_texts(path: Path) -> dict:
    texts = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        loan_id, _, rest = line.partition("\t")
        texts[loan_id] = rest.split()
    return texts


def format_texts(texts: dict) -> str:
    return "".join(f"{k}\t{' '.join(v)}\n" for k, v in texts.items())


def read_stations(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"station_id": str})


def read_indices(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"station_id": str, "year_month": str})


def read_panels(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"loan_id": str})


def model_tag(encoder: str, code: str, seed: int) -> str:
    return f"{encoder.lower()}_{code.replace('+', '')}_seed{seed}"


def mask_record(mask: ModalityMask) -> dict:
    return {"code": mask.code, "structured": mask.structured, "climate": mask.climate, "text": mask.text}


# -- stages ------------------------------------------------------------------------------------


def stage_gen_data(ws: Workspace) -> dict:
    g = ws.cfg["generate"]
    spec = GenSpec(
        n_loans=g["n_loans"],
        default_rate=g["default_rate"],
        n_stations=g["n_stations"],
        climatology_years=tuple(g["climatology_years"]),
        loan_window=tuple(g["loan_window"]),
        betas=g["betas"] or dict(DEFAULT_BETAS),
        text_rho=g["text_rho"],
        missing_rate=g["missing_rate"],
        seed=ws.cfg["seed"],
    )
    world = generate(spec)
    ws.write_csv("data/stations.csv", world.stations)
    ws.write_csv("data/weather.csv", world.weather)
    ws.write_csv("data/loans.csv", world.loans)
    ws.write_text("data/texts.tsv", format_texts(world.texts))
    ws.write_csv("data/truth.csv", world.truth)
    counts = {"loans": int(len(world.loans)), "defaults": int(world.loans["label"].sum())}
    return ws.finish("gen-data", ws.cfg["seed"], {"generator": spec.to_dict(), "counts": counts})


def stage_compute_indices(ws: Workspace) -> dict:
    ws.require("data/weather.csv", "data/stations.csv")
    weather = pd.read_csv(ws.path("data/weather.csv"), dtype={"station_id": str, "date": str})
    stations = read_stations(ws.path("data/stations.csv"))
    years = tuple(ws.cfg["generate"]["climatology_years"])
    indices = compute_monthly_indices(weather, stations, years)
    ws.write_csv("indices/monthly_indices.csv", indices)
    return ws.finish("compute-indices", None, {"rows": int(len(indices))})


def stage_build_panels(ws: Workspace) -> dict:
    ws.require("data/loans.csv", "data/stations.csv", "indices/monthly_indices.csv")
    loans = read_loans(ws.path("data/loans.csv"))
    panels, dropped = build_panels(loans, read_stations(ws.path("data/stations.csv")), read_indices(ws.path("indices/monthly_indices.csv")))
    ws.write_csv("panels/panels.csv", panels)
    ws.write_csv("panels/dropped.csv", pd.DataFrame({"loan_id": dropped}, dtype=object))
    return ws.finish("build-panels", None, {"panels": int(panels["loan_id"].nunique()) if len(panels) else 0, "dropped": len(dropped)})


def _load_inputs(ws: Workspace):
    ws.require("data/loans.csv", "data/texts.tsv", "panels/panels.csv", "panels/dropped.csv")
    loans = read_loans(ws.path("data/loans.csv"))
    dropped = set(pd.read_csv(ws.path("panels/dropped.csv"), dtype={"loan_id": str})["loan_id"])
    loans = loans[~loans["loan_id"].isin(dropped)].reset_index(drop=True)
    return loans, read_panels(ws.path("panels/panels.csv")), read_texts(ws.path("data/texts.tsv"))


def stage_prep_features(ws: Workspace) -> dict:
    loans, panels, texts = _load_inputs(ws)
    f = ws.cfg["features"]
    splits = {}
    for seed in ws.cfg["seeds"]:
        prep = prepare_dataset(
            loans, panels, texts, split_seed=seed, n_bins=f["n_bins"], max_seq_len=f["max_seq_len"],
            iv_bounds=(f["iv_min"], f["iv_max"]), vif_limit=f["vif_limit"],
        )
        base = f"features/seed{seed}"
        ws.write_text(f"{base}/plan.json", prep.plan.to_json() + "\n")
        ws.write_csv(f"{base}/selection_report.csv", prep.plan.report)
        ws.write_json(f"{base}/split.json", prep.split.to_dict())
        ws.write_text(f"{base}/vocab.json", prep.vocab.to_json() + "\n")
        splits[str(seed)] = {"checksum": prep.split.checksum(), "selected": prep.plan.selected}
    return ws.finish("prep-features", ws.cfg["seeds"], {"splits": splits})


def _prepared(ws: Workspace, seed: int, loans, panels, texts):
    base = f"features/seed{seed}"
    ws.require(f"{base}/plan.json", f"{base}/split.json", f"{base}/vocab.json")
    plan = FeaturePlan.from_json(ws.path(f"{base}/plan.json").read_text())
    split = SplitPlan.from_dict(json.loads(ws.path(f"{base}/split.json").read_text()))
    vocab = TokenVocab.from_json(ws.path(f"{base}/vocab.json").read_text())
    data = assemble_dataset(loans, panels, texts, plan, vocab, ws.cfg["features"]["max_seq_len"])
    return data, split, plan


def _base_config(cfg: dict, encoder: str, code: str, seed: int) -> ModelConfig:
    model = dict(cfg["train"]["model"])
    model.setdefault("max_seq_len", cfg["features"]["max_seq_len"])
    return ModelConfig(mask=ModalityMask.parse(code), encoder=encoder, seed=seed, **model)


def stage_train(ws: Workspace) -> dict:
    loans, panels, texts = _load_inputs(ws)
    t = ws.cfg["train"]
    entries = []
    for seed in ws.cfg["seeds"]:
        data, split, _ = _prepared(ws, seed, loans, panels, texts)
        test = data.subset(split.test)
        for encoder in t["encoders"]:
            trained = {}
            for code in t["masks"]:
                base = _base_config(ws.cfg, encoder, code, seed)
                mask = base.mask
                board = None
                if t["hybrid"] and sum((mask.structured, mask.climate, mask.text)) > 1 and (mask.climate or mask.text):
                    pretrained = {}
                    for key, uni in (("climate", "C"), ("text", "T")):
                        if getattr(mask, key):
                            if uni not in trained:
                                trained[uni] = train(_base_config(ws.cfg, encoder, uni, seed), data, split)
                            pretrained[key] = trained[uni]
                    tm = hybrid_freeze_train(pretrained, base, data, split)
                elif t["grid"]:
                    tm, board = grid_search(search_grid(base), data, split)
                else:
                    tm = train(base, data, split)
                trained[code] = tm
                tag = model_tag(encoder, code, seed)
                ckpt = f"models/{tag}.json"
                ws.path(ckpt).parent.mkdir(parents=True, exist_ok=True)
                tm.model.save(ws.path(ckpt))
                ws.outputs.append(ckpt)
                probs = tm.predict(test)
                pred = f"predictions/{tag}.csv"
                ws.write_csv(pred, pd.DataFrame({"loan_id": test.loan_ids, "label": test.labels, "probability": probs}))
                entry = {
                    "encoder": encoder,
                    "modality": mask_record(mask),
                    "seed": seed,
                    "config": tm.model.config.to_dict(),
                    "split_checksum": split.checksum(),
                    "best_epoch": tm.best_epoch,
                    "best_val_bce": tm.best_val_bce,
                    "checkpoint": ckpt,
                    "predictions": pred,
                }
                if board is not None:
                    lb = f"models/{tag}_leaderboard.csv"
                    ws.write_csv(lb, pd.DataFrame(board))
                    entry["leaderboard"] = lb
                entries.append(entry)
    return ws.finish("train", ws.cfg["seeds"], {"models": entries})


def _train_manifest(ws: Workspace) -> dict:
    p = ws.path("manifests/train.json")
    if not p.is_file():
        raise ArtifactError("missing artifact manifests/train.json (run the train stage first)")
    ws.inputs["manifests/train.json"] = sha256_of(p)
    return json.loads(p.read_text())


def _prediction_runs(ws: Workspace, models: list[dict]) -> dict:
    """(encoder, code) -> list of (seed, frame) in seed order."""
    runs: dict = {}
    for m in models:
        ws.require(m["predictions"])
        frame = pd.read_csv(ws.path(m["predictions"]), dtype={"loan_id": str})
        runs.setdefault((m["encoder"], m["modality"]["code"]), []).append((m["seed"], frame))
    for v in runs.values():
        v.sort(key=lambda r: r[0])
    return runs


def stage_evaluate(ws: Workspace) -> dict:
    models = _train_manifest(ws)["models"]
    e = ws.cfg["evaluate"]
    rows = []
    for (encoder, code), runs in _prediction_runs(ws, models).items():
        summary = bootstrap_summary(
            [(f["probability"].to_numpy(), f["label"].to_numpy()) for _, f in runs],
            resamples=e["resamples"],
            master_seed=e["master_seed"],
        )
        rows.extend(report_rows(encoder, code, summary))
        counts = {m: int(s.n) for m, s in summary.items()}
        logger.info("%s %s estimates %s", encoder, code, counts)
    ws.write_csv("reports/performance.csv", pd.DataFrame(rows, columns=["model", "modality", "metric", "mean", "ci_low", "ci_high"]))
    return ws.finish("evaluate", e["master_seed"], {"resamples_per_seed": e["resamples"]})


def stage_explain(ws: Workspace) -> dict:
    x = ws.cfg["explain"]
    models = _train_manifest(ws)["models"]
    seed = ws.cfg["seeds"][0]
    pick = {(m["encoder"], m["modality"]["code"], m["seed"]): m for m in models}
    target = pick.get((x["encoder"], ModalityMask.parse(x["mask"]).code, seed))
    if target is None:
        raise ArtifactError(f"no trained {x['encoder']} {x['mask']} model for seed {seed} in manifests/train.json")
    loans, panels, texts = _load_inputs(ws)
    data, split, plan = _prepared(ws, seed, loans, panels, texts)
    ws.require(target["checkpoint"], target["predictions"])
    model = FusionModel.load(ws.path(target["checkpoint"]))
    combined = pd.read_csv(ws.path(target["predictions"]), dtype={"loan_id": str})["probability"].to_numpy()
    test = data.subset(split.test)
    structured = pick.get((x["encoder"], "S", seed))
    cases = np.array([], dtype=np.int64)
    window = None
    if structured is not None:
        ws.require(structured["predictions"])
        ps = pd.read_csv(ws.path(structured["predictions"]), dtype={"loan_id": str})["probability"].to_numpy()
        chosen = select_uncertain_cases(ps, combined, test.labels, top_k=x["cases"])
        cases, window = split.test[chosen.indices], list(chosen.window)
    if cases.size == 0:
        gen = np.random.default_rng(seed)
        cases = np.sort(gen.choice(split.test, size=min(x["cases"], split.test.size), replace=False))
    explainer = FusionExplainer(model, plan.selected, data)
    background = sample_background(split.train, x["background"], seed)
    results = explainer.explain(cases, background, x["budget"], seed)
    shap = explainer.to_frame(cases, results)
    summary, _ = factor_attribution(results, explainer.layout)
    climate = shap[shap["factor"] != ""]
    dist = climate[["factor", "month_offset", "loan_id", "feature_value", "shap_value"]]
    ws.write_csv("explain/shap_values.csv", shap)
    ws.write_csv("explain/factor_summary.csv", summary)
    ws.write_csv("explain/factor_month_distribution.csv", dist)
    worst = max((r.local_accuracy_gap for r in results), default=0.0)
    extra = {"model": target["checkpoint"], "cases": len(results), "window": window, "max_local_accuracy_gap": worst}
    return ws.finish("explain", seed, extra)


def stage_correlate(ws: Workspace) -> dict:
    c = ws.cfg["correlate"]
    models = [m for m in _train_manifest(ws)["models"] if m["encoder"] == c["encoder"]]
    runs = _prediction_runs(ws, models)
    vectors = {code: np.concatenate([f["probability"].to_numpy() for _, f in rs]) for (_, code), rs in runs.items()}
    if not vectors:
        raise ArtifactError(f"no {c['encoder']} predictions listed in manifests/train.json")
    matrix, flagged = spearman_matrix(vectors)
    ws.write_csv("reports/modality_correlation.csv", matrix, index=True, index_label="model")
    extra = {"undefined_pairs": [list(p) for p in flagged]}
    if c["per_factor"]:
        loans, panels, texts = _load_inputs(ws)
        seed = ws.cfg["seeds"][0]
        data, split, _ = _prepared(ws, seed, loans, panels, texts)
        base = _base_config(ws.cfg, c["encoder"], "S", seed)
        report, fmat = per_factor_ablation(base, data, split, seeds=tuple(ws.cfg["seeds"]), resamples=c["resamples"])
        ws.write_csv("reports/factor_ablation.csv", report)
        ws.write_csv("reports/factor_correlation.csv", fmat, index=True, index_label="model")
    return ws.finish("correlate", ws.cfg["seeds"], extra)


STAGES = {
    "gen-data": stage_gen_data,
    "compute-indices": stage_compute_indices,
    "build-panels": stage_build_panels,
    "prep-features": stage_prep_features,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "explain": stage_explain,
    "correlate": stage_correlate,
}


# -- entry point -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="generator seed and the single run seed")
    common.add_argument("--out-dir", default="run", help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="climacredit", description="Climate-aware multimodal credit default pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common])
        if name == "gen-data":
            p.add_argument("--n-loans", dest="n_loans", type=int)
            p.add_argument("--default-rate", dest="default_rate", type=float)
            p.add_argument("--n-stations", dest="n_stations", type=int)
        if name == "train":
            p.add_argument("--modality", action="append", help="e.g. structured,climate or S+C; repeatable")
            p.add_argument("--encoder", action="append", type=str.upper, choices=["LSTM", "GRU", "TRANSFORMER"])
            for f in fields(ModelConfig):
                if f.name in MODEL_FIELDS:
                    kind = float if f.name in ("lr", "pos_weight") else int
                    p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind)
        if name in ("evaluate", "correlate"):
            p.add_argument("--resamples", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args)
    except (ConfigError, jsonschema.ValidationError, ValueError) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"config error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    ws = Workspace(args.out_dir, cfg)
    try:
        manifest = STAGES[args.stage](ws)
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to the runtime exit code
        logger.debug("stage failed", exc_info=True)
        print(f"{args.stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{args.stage}: wrote {len(manifest['outputs'])} artifacts to {ws.root}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
