"""Evaluation of a trained system: latent dumps and the full report.

The measurement protocol: encode a split in inference mode, record the
posterior (mu, sigma) per latent space, draw R resamples with a recorded
seed, and compute every metric from that frozen dump. Probes fit on the
pooled train-split resamples and are scored per test resample, reported
as means over resamples. MI grids are per latent dimension (mean over
resamples); the top-2 gap over all dimensions gives the MI gap per
factor, and per-space MI is reported as the best dimension's value.
"""

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model
from .corpus import dataset_fingerprint
from .metrics import (
    KneserNeyScorer,
    LogisticProbe,
    corpus_bleu,
    label_entropy,
    macro_prf,
    mi_continuous_discrete,
    mig,
    pca_2d,
    pearson,
    per_dimension_correlations,
    perplexity,
)
from .trainer import encode_statements

FACTOR_OF_SPACE = {"n": "negation", "u": "uncertainty"}
OBJECTIVE_LABELS = {
    (): "ELBO",
    ("inf",): "+INF",
    ("adv",): "+ADV",
    ("min",): "+MIN",
    ("adv", "inf"): "+INF+ADV",
    ("inf", "min"): "+INF+MIN",
    ("adv", "min"): "+ADV+MIN",
    ("adv", "inf", "min"): "+INF+ADV+MIN",
}


def objective_label(objective_names):
    return OBJECTIVE_LABELS.get(
        tuple(sorted(objective_names)), "+".join(sorted(objective_names))
    )


@dataclass
class LatentDump:
    ids: list
    labels: dict            # "n"/"u" -> (N,) int arrays
    mu: dict                # space -> (N, d)
    sigma: dict             # space -> (N, d)
    samples: dict           # space -> (R, N, d)
    lengths: np.ndarray     # (N,) token counts
    seed: int
    resamples: int


def dump_latents(system, statements, resamples=30, seed=0, batch_size=512):
    """Posterior parameters and R reparameterized draws for a whole split."""
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    seqs = encode_statements(system.vocab, statements)
    mus = {s: [] for s in model.SPACES}
    sigmas = {s: [] for s in model.SPACES}
    for lo in range(0, len(seqs), batch_size):
        tokens, lengths = model.pad_batch(seqs[lo : lo + batch_size])
        arrays = system.model.posterior_arrays(tokens, lengths)
        for s, (mu, sigma) in arrays.items():
            mus[s].append(mu)
            sigmas[s].append(sigma)
    mu = {s: np.concatenate(v, axis=0) for s, v in mus.items()}
    sigma = {s: np.concatenate(v, axis=0) for s, v in sigmas.items()}
    rng = np.random.default_rng([seed, 4])
    samples = {
        s: mu[s][None] + sigma[s][None] * rng.standard_normal(
            (resamples,) + mu[s].shape
        )
        for s in model.SPACES
    }
    return LatentDump(
        ids=[st.id for st in statements],
        labels={
            "n": np.array([st.negation for st in statements]),
            "u": np.array([st.uncertainty for st in statements]),
        },
        mu=mu,
        sigma=sigma,
        samples=samples,
        lengths=np.array([len(st.tokens) for st in statements]),
        seed=seed,
        resamples=resamples,
    )


def probe_informativeness(dump_train, dump_test, latent, factor):
    """Mean P/R/F1 over test resamples of a probe fit on pooled train draws."""
    if len(np.unique(dump_test.labels[factor])) < 2:
        raise ValueError(f"test labels for factor {factor!r} are single-class")
    r, n, d = dump_train.samples[latent].shape
    x_train = dump_train.samples[latent].reshape(r * n, d)
    y_train = np.tile(dump_train.labels[factor], r)
    probe = LogisticProbe().fit(x_train, y_train)
    scores = np.array([
        macro_prf(dump_test.labels[factor], probe.predict(resample))
        for resample in dump_test.samples[latent]
    ])
    mean = scores.mean(axis=0)
    return {
        "precision": float(mean[0]),
        "recall": float(mean[1]),
        "f1": float(mean[2]),
        "f1_sd": float(scores[:, 2].std()),
    }, probe


def per_dimension_mi(dump, k_neighbors=3):
    """Mean-over-resamples kNN MI of every latent dimension vs each factor."""
    out = {}
    for space in model.SPACES:
        out[space] = {}
        r, _, d = dump.samples[space].shape
        for factor in ("n", "u"):
            labels = dump.labels[factor]
            values = np.zeros(d)
            for j in range(d):
                values[j] = np.mean([
                    mi_continuous_discrete(
                        dump.samples[space][ri, :, j], labels, k_neighbors
                    )
                    for ri in range(r)
                ])
            out[space][factor] = values
    return out


def mi_gap(per_dim, labels):
    """Top-2 MI gap per factor over all latent dimensions of all spaces."""
    out = {}
    for factor in ("n", "u"):
        entries = {}
        for space in model.SPACES:
            for j, value in enumerate(per_dim[space][factor]):
                entries[f"{space}{j}"] = float(value)
        out[factor] = mig(entries, label_entropy(labels[factor]))
    return out


def correlation_report(dump):
    """Pearson invariance: scalar rho(n, u) plus per-dimension content stats."""
    pooled = {
        s: dump.samples[s].reshape(-1, dump.samples[s].shape[2])
        for s in model.SPACES
    }
    rho_nu = pearson(pooled["n"][:, 0], pooled["u"][:, 0])
    report = {"n_u": rho_nu}
    for space in ("n", "u"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            per_dim = per_dimension_correlations(pooled["c"], pooled[space][:, 0])
        valid = per_dim[~np.isnan(per_dim)]
        report[f"{space}_c"] = {
            "mean": float(valid.mean()) if valid.size else None,
            "sd": float(valid.std()) if valid.size else None,
        }
    return report


def class_centroids(dump_train):
    """Per-factor class means of the 1-d latent posterior means (train only)."""
    out = {}
    for space in ("n", "u"):
        labels = dump_train.labels[space]
        out[space] = {
            c: dump_train.mu[space][labels == c].mean(axis=0) for c in (0, 1)
        }
    return out


def reconstruct(system, statements, seed=0, max_length=20, batch_size=512):
    """Greedy reconstructions from one sampled z per statement."""
    rng = np.random.default_rng([seed, 5])
    seqs = encode_statements(system.vocab, statements)
    out = []
    for lo in range(0, len(seqs), batch_size):
        tokens, lengths = model.pad_batch(seqs[lo : lo + batch_size])
        arrays = system.model.posterior_arrays(tokens, lengths)
        zs = []
        for s in model.SPACES:
            mu, sigma = arrays[s]
            zs.append(mu + sigma * rng.standard_normal(mu.shape))
        z = model.Tensor(np.concatenate(zs, axis=1))
        for ids in system.model.decoder.generate(z, max_length):
            out.append(system.vocab.decode(ids))
    return out


def _reencode_mu(system, token_lists, batch_size=512):
    """Posterior means of re-tokenized reconstructions; empty ones map to UNK."""
    seqs = [system.vocab.encode(toks) if toks else [3] for toks in token_lists]
    mus = {s: [] for s in model.SPACES}
    for lo in range(0, len(seqs), batch_size):
        tokens, lengths = model.pad_batch(seqs[lo : lo + batch_size])
        arrays = system.model.posterior_arrays(tokens, lengths)
        for s, (mu, _) in arrays.items():
            mus[s].append(mu)
    return {s: np.concatenate(v, axis=0) for s, v in mus.items()}


def consistency_two_pass(system, statements, probes, reconstructions=None, seed=0):
    """Probe agreement with gold labels before and after a decode round trip.

    Pass 1 scores probe predictions on the inputs' posterior means; pass 2
    greedy-decodes each input from a sampled z, re-encodes the
    reconstruction, and scores the probe on the re-encoded means against
    the same gold labels. Pass 1 bounds pass 2 in practice.
    """
    seqs = encode_statements(system.vocab, statements)
    mus = {s: [] for s in model.SPACES}
    for lo in range(0, len(seqs), 512):
        tokens, lengths = model.pad_batch(seqs[lo : lo + 512])
        arrays = system.model.posterior_arrays(tokens, lengths)
        for s, (mu, _) in arrays.items():
            mus[s].append(mu)
    mu_in = {s: np.concatenate(v, axis=0) for s, v in mus.items()}
    if reconstructions is None:
        reconstructions = reconstruct(system, statements, seed=seed)
    mu_re = _reencode_mu(system, reconstructions)
    gold = {
        "n": np.array([s.negation for s in statements]),
        "u": np.array([s.uncertainty for s in statements]),
    }
    report = {}
    for k in ("n", "u"):
        p1 = macro_prf(gold[k], probes[k].predict(mu_in[k]))
        p2 = macro_prf(gold[k], probes[k].predict(mu_re[k]))
        report[k] = {
            "pass1": dict(zip(("precision", "recall", "f1"), p1)),
            "pass2": dict(zip(("precision", "recall", "f1"), p2)),
        }
    return report


def controlled_transfer(system, statements, centroids, factor, direction,
                        probe, max_length=20, batch_size=512):
    """Flip one factor by overriding its latent with the opposite centroid.

    direction is (source, target); statements whose gold label differs
    from source are skipped and counted. Success means the probe, applied
    to the re-encoded reconstruction's latent, predicts the target class.
    """
    source, target = direction
    selected = [s for s in statements if s.label(FACTOR_OF_SPACE[factor]) == source]
    skipped = len(statements) - len(selected)
    if not selected:
        return {"accuracy": None, "evaluated": 0, "skipped": skipped}, []
    seqs = encode_statements(system.vocab, selected)
    recons = []
    for lo in range(0, len(seqs), batch_size):
        tokens, lengths = model.pad_batch(seqs[lo : lo + batch_size])
        arrays = system.model.posterior_arrays(tokens, lengths)
        zs = []
        for s in model.SPACES:
            mu = arrays[s][0]
            if s == factor:
                mu = np.tile(centroids[factor][target], (mu.shape[0], 1))
            zs.append(mu)
        z = model.Tensor(np.concatenate(zs, axis=1))
        for ids in system.model.decoder.generate(z, max_length):
            recons.append(system.vocab.decode(ids))
    mu_re = _reencode_mu(system, recons)
    preds = probe.predict(mu_re[factor])
    accuracy = float((preds == target).mean())
    return {
        "accuracy": accuracy,
        "evaluated": len(selected),
        "skipped": skipped,
    }, recons


def length_r2_report(dump):
    from .metrics import length_regression

    out = {}
    for space in model.SPACES:
        pooled = dump.samples[space].reshape(-1, dump.samples[space].shape[2])
        lengths = np.tile(dump.lengths, dump.resamples)
        out[space] = length_regression(pooled, lengths)
    return out


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

def evaluate_system(system, splits, resamples=30, seed=0, out_dir=None,
                    transfer_cap=500):
    """Compute the complete report for one trained run.

    Informativeness/MI/MIG/correlations/consistency/transfer are measured
    on the test split (probes fit on train resamples); self-BLEU and
    perplexity cover all three splits; the content projection and latent
    CSVs are exported when out_dir is given.
    """
    dump_train = dump_latents(system, splits["train"].statements,
                              resamples=resamples, seed=seed)
    dump_test = dump_latents(system, splits["test"].statements,
                             resamples=resamples, seed=seed + 1)

    informativeness = {}
    probes = {}
    for space in model.SPACES:
        informativeness[space] = {}
        for factor in ("n", "u"):
            scores, probe = probe_informativeness(dump_train, dump_test,
                                                  space, factor)
            informativeness[space][factor] = scores
            if space == factor:
                probes[factor] = probe

    per_dim = per_dimension_mi(dump_test)
    for space in model.SPACES:
        for factor in ("n", "u"):
            informativeness[space][factor]["mi"] = float(
                per_dim[space][factor].max()
            )
    gaps = mi_gap(per_dim, dump_test.labels)
    correlations = correlation_report(dump_test)

    bleu = {}
    ppl = {}
    kn = KneserNeyScorer([list(s.tokens) for s in splits["train"].statements])
    recons_by_split = {}
    for name in ("train", "dev", "test"):
        stmts = splits[name].statements
        recons = reconstruct(system, stmts, seed=seed + 2)
        recons_by_split[name] = recons
        bleu[name] = corpus_bleu([list(s.tokens) for s in stmts], recons)
        ppl[name] = perplexity(recons, kn)

    consistency = consistency_two_pass(
        system, splits["test"].statements, probes,
        reconstructions=recons_by_split["test"],
    )

    centroids = class_centroids(dump_train)
    rng = np.random.default_rng([seed, 6])
    test_stmts = splits["test"].statements
    if len(test_stmts) > transfer_cap:
        pick = rng.choice(len(test_stmts), size=transfer_cap, replace=False)
        test_stmts = [test_stmts[i] for i in sorted(pick)]
    transfer = {}
    for space in ("n", "u"):
        factor_name = FACTOR_OF_SPACE[space]
        transfer[factor_name] = {}
        for direction, tag in (((1, 0), "1->0"), ((0, 1), "0->1")):
            result, _ = controlled_transfer(
                system, test_stmts, centroids, space, direction, probes[space]
            )
            transfer[factor_name][tag] = result

    report = {
        "objectives": list(system.config.objectives),
        "objective_label": objective_label(system.config.objectives),
        "seed": system.config.seed,
        "eval_seed": seed,
        "resamples": resamples,
        "config_hash": system.config.config_hash(),
        "data_fingerprint": dataset_fingerprint(splits),
        "informativeness": informativeness,
        "mi_per_dimension": {
            s: {f: per_dim[s][f].tolist() for f in ("n", "u")}
            for s in model.SPACES
        },
        "mig": gaps,
        "correlation": correlations,
        "self_bleu": bleu,
        "perplexity": ppl,
        "consistency": consistency,
        "transfer": transfer,
        "length_r2": length_r2_report(dump_test),
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        export_latents_csv(dump_test, out_dir / "latents_test.csv")
        export_projection(dump_test, out_dir / "projection_test.csv")
    return report


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def export_latents_csv(dump, path):
    """Long-format CSV: one row per (statement, resample) with all z values."""
    dims_c = dump.samples["c"].shape[2]
    header = (
        ["id", "resample", "y_neg", "y_unc", "z_n", "z_u"]
        + [f"z_c_{j}" for j in range(dims_c)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ri in range(dump.resamples):
            for i, sid in enumerate(dump.ids):
                row = [
                    sid,
                    ri,
                    int(dump.labels["n"][i]),
                    int(dump.labels["u"][i]),
                    repr(float(dump.samples["n"][ri, i, 0])),
                    repr(float(dump.samples["u"][ri, i, 0])),
                ]
                row.extend(repr(float(v)) for v in dump.samples["c"][ri, i])
                writer.writerow(row)


def export_projection(dump, path):
    """2-d principal components of content means plus the raw 1-d latents."""
    coords = pca_2d(dump.mu["c"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "y_neg", "y_unc", "pc1", "pc2", "mu_n", "mu_u"])
        for i, sid in enumerate(dump.ids):
            writer.writerow([
                sid,
                int(dump.labels["n"][i]),
                int(dump.labels["u"][i]),
                repr(float(coords[i, 0])),
                repr(float(coords[i, 1])),
                repr(float(dump.mu["n"][i, 0])),
                repr(float(dump.mu["u"][i, 0])),
            ])
    return coords
