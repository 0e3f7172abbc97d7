"""Weak statement labeling with Bernoulli naive Bayes over selected tokens.

For each factor (negation / uncertainty) a classifier is trained on a gold
split: candidate bag-of-words presence features are scored with a
two-group ANOVA F statistic against the labels, the top K tokens are kept,
and a Bernoulli naive Bayes model with additive smoothing is fit on them.
The fitted models then stamp weak labels onto unlabeled statements.
"""

import json
from dataclasses import dataclass

import numpy as np

from .corpus import Statement


@dataclass(frozen=True)
class BowFeatureSet:
    factor: str
    tokens: tuple

    @property
    def k(self):
        return len(self.tokens)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("feature tokens must be distinct")


@dataclass
class NaiveBayesModel:
    factor: str
    feature_set: BowFeatureSet
    log_prior: np.ndarray        # (2,), log class priors
    feature_prob: np.ndarray     # (K, 2), smoothed P(feature present | class)
    alpha: float

    def __post_init__(self):
        if not np.isclose(np.exp(self.log_prior).sum(), 1.0):
            raise ValueError("class priors must sum to 1")
        if np.any(self.feature_prob <= 0) or np.any(self.feature_prob >= 1):
            raise ValueError("smoothed Bernoulli parameters must lie in (0, 1)")


def anova_f_scores(features, labels):
    """Two-group one-way ANOVA F statistic per feature column.

    F = between-group mean square / within-group mean square. Columns with
    no variance at all score 0; columns that separate the groups exactly
    (zero within-group variance, positive between) score +inf, which
    orders them above every finite score.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    classes = np.unique(y)
    if len(classes) != 2:
        raise ValueError("labels must contain both classes")
    g0 = x[y == classes[0]]
    g1 = x[y == classes[1]]
    n0, n1 = len(g0), len(g1)
    m0 = g0.mean(axis=0)
    m1 = g1.mean(axis=0)
    grand = x.mean(axis=0)
    ssb = n0 * (m0 - grand) ** 2 + n1 * (m1 - grand) ** 2
    ssw = ((g0 - m0) ** 2).sum(axis=0) + ((g1 - m1) ** 2).sum(axis=0)
    dfw = n - 2
    scores = np.zeros(x.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        if dfw > 0:
            finite = ssw > 0
            scores[finite] = (ssb[finite] / 1.0) / (ssw[finite] / dfw)
        else:
            finite = np.zeros(x.shape[1], dtype=bool)
        perfect = (~finite) & (ssb > 0)
        scores[perfect] = np.inf
    return scores


def select_top_k(scores, tokens, k):
    """The K highest-scoring feature tokens, ties broken lexicographically."""
    if k > len(scores):
        raise ValueError(f"K={k} exceeds the {len(scores)} candidate features")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], tokens[i]))
    return tuple(tokens[i] for i in order[:k])


def _presence_matrix(statements, tokens):
    index = {tok: j for j, tok in enumerate(tokens)}
    x = np.zeros((len(statements), len(tokens)), dtype=np.float64)
    for i, stmt in enumerate(statements):
        for tok in set(stmt.tokens):
            j = index.get(tok)
            if j is not None:
                x[i, j] = 1.0
    return x


def fit(statements, factor, k=20, alpha=1.0):
    """Select features by ANOVA F and fit the Bernoulli NB parameters."""
    if alpha <= 0:
        raise ValueError("smoothing alpha must be > 0")
    labels = np.array([s.label(factor) for s in statements])
    if len(np.unique(labels)) != 2:
        raise ValueError(f"{factor}: training data must contain both classes")
    candidates = sorted({tok for s in statements for tok in s.tokens})
    scores = anova_f_scores(_presence_matrix(statements, candidates), labels)
    selected = select_top_k(scores, candidates, min(k, len(candidates)))
    feature_set = BowFeatureSet(factor=factor, tokens=selected)

    x = _presence_matrix(statements, selected)
    n = len(statements)
    counts = np.array([(labels == 0).sum(), (labels == 1).sum()], dtype=np.float64)
    log_prior = np.log(counts / n)
    present = np.stack(
        [x[labels == 0].sum(axis=0), x[labels == 1].sum(axis=0)], axis=1
    )
    feature_prob = (present + alpha) / (counts[None, :] + 2 * alpha)
    return NaiveBayesModel(
        factor=factor,
        feature_set=feature_set,
        log_prior=log_prior,
        feature_prob=feature_prob,
        alpha=alpha,
    )


def _log_scores(model, tokens):
    present = np.array(
        [tok in set(tokens) for tok in model.feature_set.tokens], dtype=np.float64
    )
    loglik = present[:, None] * np.log(model.feature_prob) + (
        1.0 - present[:, None]
    ) * np.log(1.0 - model.feature_prob)
    return model.log_prior + loglik.sum(axis=0)


def predict(model, tokens):
    """(label, posterior of that label). Ties resolve to label 0."""
    scores = _log_scores(model, tokens)
    shift = scores - scores.max()
    post = np.exp(shift) / np.exp(shift).sum()
    label = 1 if scores[1] > scores[0] else 0
    return label, float(post[label])


def evaluate(model, statements):
    """Precision/recall/F1 of the positive class on gold statements."""
    tp = fp = fn = 0
    for stmt in statements:
        pred, _ = predict(model, stmt.tokens)
        gold = stmt.label(model.factor)
        if pred == 1 and gold == 1:
            tp += 1
        elif pred == 1 and gold == 0:
            fp += 1
        elif pred == 0 and gold == 1:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def weak_label_corpus(models, statements):
    """Stamp predicted labels onto statements; text unchanged, source=weak."""
    out = []
    for stmt in statements:
        neg, _ = predict(models["negation"], stmt.tokens)
        unc, _ = predict(models["uncertainty"], stmt.tokens)
        out.append(
            Statement(
                id=stmt.id,
                tokens=stmt.tokens,
                negation=neg,
                uncertainty=unc,
                label_source="weak",
            )
        )
    return out


def save_model(model, path):
    doc = {
        "factor": model.factor,
        "k": model.feature_set.k,
        "feature_tokens": list(model.feature_set.tokens),
        "log_prior": model.log_prior.tolist(),
        "feature_prob": model.feature_prob.tolist(),
        "alpha": model.alpha,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return NaiveBayesModel(
        factor=doc["factor"],
        feature_set=BowFeatureSet(doc["factor"], tuple(doc["feature_tokens"])),
        log_prior=np.array(doc["log_prior"]),
        feature_prob=np.array(doc["feature_prob"]),
        alpha=doc["alpha"],
    )
