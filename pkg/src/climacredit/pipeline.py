"""Glue between raw tables and model-ready datasets, plus the modality study."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .encoders import TokenVocab
from .explain import FusionExplainer, factor_attribution, sample_background, select_uncertain_cases
from .features import FeaturePlan, select_features
from .metrics import auc
from .panel import FACTORS, panels_to_array
from .synth import CATEGORICAL_FEATURES, CONTINUOUS_FEATURES
from .trainer import Dataset, ModalityMask, ModelConfig, SplitPlan, make_split, train

logger = logging.getLogger(__name__)

LOAN_BASE_COLUMNS = ["loan_id", "lat", "lon", "start_date", "term_months", "label"]


def structured_columns(loans: pd.DataFrame) -> tuple[list[str], list[str]]:
    """Continuous and categorical attribute columns present in a loan table."""
    extra = [c for c in loans.columns if c not in LOAN_BASE_COLUMNS]
    continuous = [c for c in extra if c in CONTINUOUS_FEATURES]
    categorical = [c for c in extra if c in CATEGORICAL_FEATURES]
    for c in extra:
        if c in continuous or c in categorical:
            continue
        (continuous if pd.api.types.is_numeric_dtype(loans[c]) else categorical).append(c)
    return continuous, categorical


@dataclass
class PreparedData:
    data: Dataset
    plan: FeaturePlan
    split: SplitPlan
    vocab: TokenVocab


def assemble_dataset(
    loans: pd.DataFrame,
    panels: pd.DataFrame,
    texts: dict,
    plan: FeaturePlan,
    vocab: TokenVocab,
    max_seq_len: int = 326,
) -> Dataset:
    """Model-ready arrays for every loan under an already fitted plan and vocabulary."""
    loans = loans.reset_index(drop=True)
    ids = loans["loan_id"].astype(str).tolist()
    text_ids, text_mask = vocab.batch([texts.get(i, []) for i in ids], max_seq_len)
    return Dataset(
        loans["label"].to_numpy(dtype=np.int64),
        plan.transform(loans),
        panels_to_array(panels, ids),
        text_ids,
        text_mask,
        ids,
        vocab,
    )


def prepare_dataset(
    loans: pd.DataFrame,
    panels: pd.DataFrame,
    texts: dict,
    split_seed: int = 0,
    n_bins: int = 5,
    max_seq_len: int = 326,
    iv_bounds=(0.01, 0.50),
    vif_limit: float = 10.0,
    split: SplitPlan | None = None,
) -> PreparedData:
    """Split, then fit imputation/WoE/selection and the vocabulary on training rows only."""
    loans = loans.reset_index(drop=True)
    labels = loans["label"].to_numpy(dtype=np.int64)
    split = make_split(labels, split_seed) if split is None else split
    continuous, categorical = structured_columns(loans)
    train_rows = loans.iloc[split.train]
    plan = select_features(train_rows, labels[split.train], continuous, categorical, n_bins, iv_bounds, vif_limit)
    train_ids = train_rows["loan_id"].astype(str)
    vocab = TokenVocab.fit([texts.get(i, []) for i in train_ids])
    data = assemble_dataset(loans, panels, texts, plan, vocab, max_seq_len)
    return PreparedData(data, plan, split, vocab)


# -- modality study ------------------------------------------------------------------

STUDY_MASKS = ("S", "C", "T", "S+C", "S+C+T")


@dataclass
class StudySettings:
    encoder: str = "TRANSFORMER"
    hidden_size: int = 16
    num_layers: int = 1
    heads: int = 2
    ff_dim: int = 32
    text_embed_dim: int = 16
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5
    shap_cases: int = 20
    shap_background: int = 20
    shap_budget: int = 512

    def model_config(self, mask: str, seed: int) -> ModelConfig:
        return ModelConfig(
            mask=ModalityMask.parse(mask),
            encoder=self.encoder,
            hidden_size=self.hidden_size,
            num_layers=self.num_layers,
            heads=self.heads,
            ff_dim=self.ff_dim,
            text_embed_dim=self.text_embed_dim,
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=seed,
        )


def modality_study(prepared: PreparedData, seed: int, settings: StudySettings, masks=STUDY_MASKS, explain_mask: str = "S+C+T"):
    """Train each modality configuration for one seed; test AUCs and factor SHAP ranking."""
    data, split = prepared.data, prepared.split
    test = data.subset(split.test)
    aucs, probs, models = {}, {}, {}
    for code in masks:
        tm = train(settings.model_config(code, seed), data, split)
        p = tm.predict(test)
        aucs[code], probs[code], models[code] = auc(p, test.labels), p, tm
        logger.info("seed %d %s auc %.4f epochs %d", seed, code, aucs[code], len(tm.val_curve))
    factor_table = None
    if explain_mask in models and settings.shap_cases > 0:
        explainer = FusionExplainer(models[explain_mask].model, prepared.plan.selected, data)
        background = sample_background(split.train, settings.shap_background, seed)
        if "S" in probs:
            chosen = select_uncertain_cases(probs["S"], probs[explain_mask], test.labels, top_k=settings.shap_cases)
            cases = split.test[chosen.indices]
        else:
            cases = np.array([], dtype=np.int64)
        if cases.size == 0:
            gen = np.random.default_rng(seed)
            cases = np.sort(gen.choice(split.test, size=min(settings.shap_cases, split.test.size), replace=False))
        results = explainer.explain(cases, background, settings.shap_budget, seed)
        factor_table, _ = factor_attribution(results, explainer.layout)
    return aucs, probs, factor_table
