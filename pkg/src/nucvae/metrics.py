"""Measurement primitives for the disentanglement evaluation suite.

Pure functions over numpy arrays / token lists: logistic-regression
probes, a k-nearest-neighbor mutual information estimator for continuous
codes against discrete labels, the normalized top-2 MI gap, Pearson
correlations, corpus BLEU, perplexity with a Kneser-Ney n-gram fallback
scorer, length regressions, and a 2-d principal-component projection.
"""

import warnings
from collections import Counter

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma


# ---------------------------------------------------------------------------
# classification scores
# ---------------------------------------------------------------------------

def binary_prf(y_true, y_pred, positive=1):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = np.sum((y_pred == positive) & (y_true == positive))
    fp = np.sum((y_pred == positive) & (y_true != positive))
    fn = np.sum((y_pred != positive) & (y_true == positive))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return float(p), float(r), float(f1)


def macro_prf(y_true, y_pred):
    """Macro-averaged precision/recall/F1 over the two classes."""
    scores = [binary_prf(y_true, y_pred, positive=c) for c in (0, 1)]
    return tuple(float(np.mean([s[i] for s in scores])) for i in range(3))


class LogisticProbe:
    """L2-regularized logistic regression fit by Newton iterations."""

    def __init__(self, l2=1e-3, max_iter=100, tol=1e-9):
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol
        self.coef = None

    def fit(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(y, dtype=np.float64)
        if len(np.unique(y)) < 2:
            raise ValueError("probe training labels contain a single class")
        n, d = x.shape
        xa = np.concatenate([x, np.ones((n, 1))], axis=1)
        theta = np.zeros(d + 1)
        reg = np.full(d + 1, self.l2)
        reg[-1] = 0.0  # intercept unregularized
        for _ in range(self.max_iter):
            logits = xa @ theta
            p = 1.0 / (1.0 + np.exp(-logits))
            grad = xa.T @ (p - y) / n + reg * theta
            if np.abs(grad).max() < self.tol:
                break
            s = np.maximum(p * (1.0 - p), 1e-12)
            hess = (xa * s[:, None]).T @ xa / n + np.diag(np.maximum(reg, 1e-12))
            theta = theta - np.linalg.solve(hess, grad)
        self.coef = theta
        return self

    def decision(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        return x @ self.coef[:-1] + self.coef[-1]

    def predict(self, x):
        return (self.decision(x) > 0).astype(int)

    def predict_proba(self, x):
        return 1.0 / (1.0 + np.exp(-self.decision(x)))


# ---------------------------------------------------------------------------
# mutual information
# ---------------------------------------------------------------------------

def mi_continuous_discrete(z, labels, k_neighbors=3):
    """kNN mutual information between a continuous code and discrete labels.

    Same-class distances to the k-th neighbor define a radius per point;
    counting how many points of the full sample fall inside that radius
    yields the digamma-based estimate. Nonnegative by clamping; exactly 0
    for a constant code.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    labels = np.asarray(labels)
    n = len(z)
    if n < 50:
        raise ValueError("MI estimation needs at least 50 samples")
    if len(np.unique(labels)) < 2:
        raise ValueError("labels contain a single class")
    if np.allclose(z.var(axis=0), 0.0):
        return 0.0

    radius = np.empty(n)
    label_count = np.empty(n)
    k_used = np.empty(n)
    for lab in np.unique(labels):
        mask = labels == lab
        count = int(mask.sum())
        label_count[mask] = count
        if count > 1:
            k = min(k_neighbors, count - 1)
            tree = cKDTree(z[mask])
            dist, _ = tree.query(z[mask], k=k + 1)
            radius[mask] = np.nextafter(dist[:, -1], 0)
            k_used[mask] = k

    keep = label_count > 1
    z = z[keep]
    radius = radius[keep]
    label_count = label_count[keep]
    k_used = k_used[keep]
    m = len(z)
    full = cKDTree(z)
    inside = full.query_ball_point(z, radius, return_length=True)
    counts = np.asarray(inside, dtype=np.float64) - 1.0

    mi = (
        digamma(m)
        + np.mean(digamma(k_used))
        - np.mean(digamma(label_count))
        - np.mean(digamma(counts + 1.0))
    )
    return float(max(0.0, mi))


def label_entropy(labels):
    """Entropy in nats of the empirical label distribution."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("labels must be nonempty")
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mig(mi_by_latent, entropy):
    """Normalized gap between the top-2 MI values, clamped to [0, 1]."""
    if entropy <= 0:
        raise ValueError("label entropy must be positive")
    if len(mi_by_latent) < 2:
        raise ValueError("need MI values for at least 2 latent variables")
    values = sorted(mi_by_latent.values(), reverse=True)
    gap = (values[0] - values[1]) / entropy
    return float(min(1.0, max(0.0, gap)))


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

def pearson(x, y):
    """Pearson's rho; None (with a warning) if either series is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.std() == 0.0 or y.std() == 0.0:
        warnings.warn("zero-variance series: correlation undefined", RuntimeWarning)
        return None
    return float(np.corrcoef(x, y)[0, 1])


def per_dimension_correlations(z_multi, z_single):
    """Pearson's rho of each column of z_multi against the 1-d series.

    Constant columns yield NaN entries (warned once); summarize with
    nanmean/nanstd.
    """
    z_multi = np.asarray(z_multi, dtype=np.float64)
    z_single = np.asarray(z_single, dtype=np.float64).ravel()
    out = np.full(z_multi.shape[1], np.nan)
    warned = False
    for j in range(z_multi.shape[1]):
        col = z_multi[:, j]
        if col.std() == 0.0 or z_single.std() == 0.0:
            if not warned:
                warnings.warn(
                    "zero-variance dimension: correlation undefined", RuntimeWarning
                )
                warned = True
            continue
        out[j] = np.corrcoef(col, z_single)[0, 1]
    return out


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(references, hypotheses, max_n=4):
    """Corpus BLEU up to 4-grams, uniform weights, brevity penalty.

    Zero clipped-match counts are add-one smoothed: p_n = (m+1)/(t+1)
    when m == 0, which also covers orders with no hypothesis n-grams.
    """
    if not references:
        raise ValueError("empty corpus")
    if len(references) != len(hypotheses):
        raise ValueError("reference and hypothesis lists differ in length")
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    ref_len = hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_n + 1):
            ref_counts = _ngram_counts(ref, n)
            hyp_counts = _ngram_counts(hyp, n)
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in hyp_counts.items()
            )
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if m > 0 else (m + 1.0) / (t + 1.0)
        log_p += np.log(p) / max_n
    bp = 1.0 if hyp_len > ref_len else np.exp(1.0 - ref_len / hyp_len)
    return float(bp * np.exp(log_p))


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------

def perplexity(token_seqs, scorer):
    """exp(total NLL / total scored tokens) under any LM scorer.

    A scorer exposes score(tokens) -> (nll_in_nats, n_scored_tokens).
    """
    total_nll = 0.0
    total_tokens = 0
    for tokens in token_seqs:
        try:
            nll, count = scorer.score(tokens)
        except Exception as err:
            raise RuntimeError(f"LM scorer failed on {tokens!r}: {err}") from err
        total_nll += nll
        total_tokens += count
    if total_tokens == 0:
        raise ValueError("no tokens to score")
    return float(np.exp(total_nll / total_tokens))


class UniformScorer:
    """Assigns 1/V to every token; perplexity equals V."""

    def __init__(self, vocab_size):
        self.vocab_size = vocab_size

    def score(self, tokens):
        n = len(tokens)
        return n * np.log(self.vocab_size), n


class KneserNeyScorer:
    """Interpolated Kneser-Ney trigram model over whitespace tokens.

    The fallback fluency scorer: trained on the training split's token
    lists, scores each statement's tokens plus a terminal end symbol,
    mapping unseen tokens to an unknown symbol. A final interpolation
    with the uniform distribution keeps every probability positive.
    """

    BOS = "<s>"
    EOS = "</s>"
    UNK = "<unk>"

    def __init__(self, training_seqs, discount=0.75):
        self.discount = discount
        self.vocab = {self.EOS, self.UNK}
        for seq in training_seqs:
            self.vocab.update(seq)
        self.tri = Counter()
        self.bi_ctx = Counter()          # c(uv.) for trigram denominators
        self.tri_types = Counter()       # N1+(uv.)
        self.cont_bi = Counter()         # N1+(.vw)
        self.cont_bi_ctx = Counter()     # N1+(.v.)
        self.bi_types = Counter()        # N1+(v.)
        self.cont_uni = Counter()        # N1+(.w)
        seen_tri = set()
        seen_bi = set()
        for seq in training_seqs:
            toks = [self.BOS, self.BOS] + list(seq) + [self.EOS]
            for i in range(2, len(toks)):
                u, v, w = toks[i - 2], toks[i - 1], toks[i]
                self.tri[(u, v, w)] += 1
                self.bi_ctx[(u, v)] += 1
                if (u, v, w) not in seen_tri:
                    seen_tri.add((u, v, w))
                    self.tri_types[(u, v)] += 1
                    self.cont_bi[(v, w)] += 1
                    self.cont_bi_ctx[v] += 1
                if (v, w) not in seen_bi:
                    seen_bi.add((v, w))
                    self.bi_types[v] += 1
                    self.cont_uni[w] += 1
        self.n_bigram_types = len(seen_bi)

    def _p_unigram(self, w):
        d = self.discount
        total = self.n_bigram_types
        v = len(self.vocab)
        if total == 0:
            return 1.0 / v
        p_cont = max(self.cont_uni[w] - d, 0.0) / total
        backoff = d * len(self.cont_uni) / total
        return p_cont + backoff / v

    def _p_bigram(self, v_tok, w):
        d = self.discount
        denom = self.cont_bi_ctx[v_tok]
        if denom == 0:
            return self._p_unigram(w)
        p = max(self.cont_bi[(v_tok, w)] - d, 0.0) / denom
        lam = d * self.bi_types[v_tok] / denom
        return p + lam * self._p_unigram(w)

    def _p_trigram(self, u, v_tok, w):
        d = self.discount
        denom = self.bi_ctx[(u, v_tok)]
        if denom == 0:
            return self._p_bigram(v_tok, w)
        p = max(self.tri[(u, v_tok, w)] - d, 0.0) / denom
        lam = d * self.tri_types[(u, v_tok)] / denom
        return p + lam * self._p_bigram(v_tok, w)

    def _norm(self, tok):
        return tok if tok in self.vocab else self.UNK

    def score(self, tokens):
        toks = [self.BOS, self.BOS] + [self._norm(t) for t in tokens] + [self.EOS]
        nll = 0.0
        for i in range(2, len(toks)):
            p = self._p_trigram(toks[i - 2], toks[i - 1], toks[i])
            nll -= np.log(p)
        return nll, len(toks) - 2


# ---------------------------------------------------------------------------
# regressions and projections
# ---------------------------------------------------------------------------

def length_regression(z, lengths):
    """In-sample R^2 of an OLS regression of sequence length on the code.

    Rank-deficient designs fall back to the least-norm solution via lstsq.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    y = np.asarray(lengths, dtype=np.float64)
    if len(z) < z.shape[1] + 2:
        raise ValueError("need at least dims + 2 samples")
    xa = np.concatenate([z, np.ones((len(z), 1))], axis=1)
    coef, *_ = np.linalg.lstsq(xa, y, rcond=None)
    resid = y - xa @ coef
    ss_tot = ((y - y.mean()) ** 2).sum()
    if ss_tot == 0.0:
        return 0.0
    return float(1.0 - (resid**2).sum() / ss_tot)


def pca_2d(x):
    """Deterministic 2-d principal-component projection of the rows of x."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T
