"""End-to-end experiment pipeline.

Stages run in order — data, phase1 (metric meta-learning), ssl, prior,
filter, eval — each writing its artifacts under the run directory so a
resumed run can skip completed stages.  All randomness flows from the
single config seed through named stream splits, and the metrics JSON is
written with sorted keys so identical configs produce byte-identical
output.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import datagen, ssl
from .bayes import (NIWParams, default_prior, meta_fit_prior, predict_bayes,
                    lda_fit, qda_decide, qda_fit_mle)
from .calibration import (PredictionRecord, abce, bin_reliability,
                          class_confidences, ece, reliability_export)
from .encoder import (build_encoder, build_metric_encoder, encode,
                      modified_distances, scaled_unit)
from .errors import InvalidParameterError, UBMFError
from .net.core import load_network, save_network
from .rng import rng_for
from .selector import (FilterThresholds, TrainFilterConfig, FilterWeights,
                       FilterHead, evaluate_rejection, filter_dataset,
                       joint_ood_score, mk_ood_batch, ood_scores,
                       train_filter, write_filter_decisions)
from .tasks import (EvalSummary, auroc, evaluate, protonet_baseline,
                    train_protonet_encoder)

STAGES = ("data", "phase1", "ssl", "prior", "filter", "eval")

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": {
        "path": None,
        "n_classes": 5,
        "length": 1024,
        "per_class_per_condition": 80,
        "labeled_per_class": 4,
        "unlabeled_counts": [100, 20, 20, 20, 20],
        "noise": 0.25,
    },
    "encoder": {"dim": 16},
    "phase1": {
        "iters": 300, "lr_encoder": 1e-2, "lr_metric": 1e-2,
        "metric_interval": 10, "support_per_class": 2,
        "query_per_class": 2, "unlabeled_batch": 16,
        "max_grad_norm": 10.0, "weight_decay": 1e-4, "momentum": 0.0,
    },
    "ssl": {
        "iters": 300, "batch": 16, "tau": 0.5, "tau_p": 0.8,
        "lambda": 1.0, "lr_encoder": 1e-2, "injection_ratio": 0.0,
        "max_grad_norm": 10.0, "weight_decay": 1e-4, "momentum": 0.0,
    },
    "prior": {"iters": 500, "lr": 1e-2, "max_grad_norm": 10.0},
    "filter": {
        "outer_iters": 120, "warmup_inner": 80, "n_tasks": 4,
        "batch_in": 24, "batch_out": 24, "lr_inner": 5e-2,
        "lr_outer": 2e-2, "temperature": 1.0, "lambda_align": 0.1,
        "ood_percentile": 95.0, "omega_out": 1.0, "omega_cal": 0.5,
        "lambda_t": 0.05, "lambda_out": 0.05, "alpha_in": 10.0,
    },
    "thresholds": {"tau_c": 0.8, "sweep": [0.7, 0.8, 0.9]},
    "eval": {"max_n": None, "n_tasks": 100},
    "baseline": {"iters": 200, "lr": 1e-2},
    "calibration": {"bins": 10, "v": 2.0},
    "classifier": "bayes",
    "use_metric": True,
}


class StageFailure(UBMFError):
    """A pipeline stage failed; earlier artifacts are retained."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


def deep_update(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """'a.b.c=value' -> (path, parsed value); values parse as JSON with a
    bare-string fallback."""
    if "=" not in text:
        raise InvalidParameterError(f"override '{text}' is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = cfg
        for p in path[:-1]:
            if p not in node or not isinstance(node[p], dict):
                node[p] = {}
            node = node[p]
        node[path[-1]] = value
    return cfg


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = deep_update(cfg, json.load(fh))
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    if "seed" not in cfg or cfg["seed"] is None:
        raise InvalidParameterError("config must set a seed")
    dp = cfg["data"].get("path")
    if dp is not None and not os.path.exists(dp):
        raise InvalidParameterError(f"dataset path does not exist: {dp}")
    return cfg


def _sanitize(obj):
    """JSON-safe copy: NaN/inf become None."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    return obj


def validate_metrics(metrics: dict):
    """Every number must be finite (sentinels are None, not NaN)."""
    def walk(node, where):
        if isinstance(node, dict):
            for k, v in node.items():
                walk(v, f"{where}.{k}")
        elif isinstance(node, list):
            for i, v in enumerate(node):
                walk(v, f"{where}[{i}]")
        elif isinstance(node, float) and not np.isfinite(node):
            raise InvalidParameterError(f"non-finite metric at {where}")
    walk(metrics, "metrics")
    for key in ("seed", "eval", "calibration", "ood", "rejection"):
        if key not in metrics:
            raise InvalidParameterError(f"metrics JSON missing '{key}'")


def write_metrics(path: str, metrics: dict):
    metrics = _sanitize(metrics)
    validate_metrics(metrics)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(metrics, sort_keys=True, indent=2,
                            allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# run context and stages

@dataclass
class RunPaths:
    root: str

    def __post_init__(self):
        self.checkpoints = os.path.join(self.root, "checkpoints")
        self.logs = os.path.join(self.root, "logs")
        os.makedirs(self.checkpoints, exist_ok=True)
        os.makedirs(self.logs, exist_ok=True)

    def ck(self, name: str) -> str:
        return os.path.join(self.checkpoints, name)

    def log(self, name: str) -> str:
        return os.path.join(self.logs, name)

    def art(self, name: str) -> str:
        return os.path.join(self.root, name)


def _jsonl_writer(path):
    def write(rec):
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return write


def _fresh(path):
    if os.path.exists(path):
        os.remove(path)


class Run:
    """Mutable state threaded through the stages."""

    def __init__(self, cfg: dict, resume: bool = False):
        self.cfg = cfg
        self.resume = resume
        self.paths = RunPaths(cfg["out_dir"])
        self.dataset = None
        self.split = None
        self.encoder = None
        self.metric = None
        self.prior = None
        self.feat_stats = None
        self.head = None
        self.thresholds = None
        self.metrics = {}

    # -- data ---------------------------------------------------------------
    def stage_data(self):
        cfg = self.cfg
        out = self.paths.art("data.ubmf")
        split_path = self.paths.art("split.json")
        if cfg["data"].get("path"):
            self.dataset = datagen.load_dataset(cfg["data"]["path"])
        elif self.resume and os.path.exists(out):
            self.dataset = datagen.load_dataset(out)
        else:
            manifest = datagen.default_manifest(
                n_classes=cfg["data"]["n_classes"],
                length=cfg["data"]["length"],
                per_class_per_condition=cfg["data"]["per_class_per_condition"],
                noise=cfg["data"]["noise"])
            self.dataset = datagen.generate(manifest, seed=cfg["seed"])
            datagen.save_dataset(out, self.dataset)
        if self.resume and os.path.exists(split_path):
            with open(split_path, "r", encoding="utf-8") as fh:
                self.split = {k: np.asarray(v, dtype=np.int64)
                              for k, v in json.load(fh).items()}
        else:
            K = len(self.dataset.manifest["classes"])
            lab = [cfg["data"]["labeled_per_class"]] * K
            unlab = list(cfg["data"]["unlabeled_counts"])[:K]
            unlab += [unlab[-1]] * (K - len(unlab))
            self.split = datagen.split_indices(
                self.dataset, lab, unlab, seed=cfg["seed"])
            with open(split_path, "w", encoding="utf-8") as fh:
                json.dump({k: v.tolist() for k, v in self.split.items()},
                          fh, sort_keys=True)

    def _arrays(self):
        sset = self.dataset.to_signal_set()
        X = sset.X
        y = self.dataset.labels()
        ids = list(sset.source_ids)
        return X, y, ids

    # -- phase 1: metric meta-learning -------------------------------------
    def stage_phase1(self):
        cfg = self.cfg
        enc_path = self.paths.ck("encoder_phase1.net")
        met_path = self.paths.ck("metric.net")
        d = cfg["encoder"]["dim"]
        X, y, _ = self._arrays()
        channels = X.shape[1]
        if self.resume and os.path.exists(enc_path) and os.path.exists(met_path):
            self.encoder = load_network(enc_path)
            self.metric = load_network(met_path)
            return
        self.encoder = build_encoder(d, channels, seed=cfg["seed"])
        self.metric = build_metric_encoder(d, seed=cfg["seed"])
        p1 = cfg["phase1"]
        sc = ssl.SSLConfig(iters=p1["iters"], lr_encoder=p1["lr_encoder"],
                           lr_metric=p1["lr_metric"],
                           metric_interval=p1["metric_interval"],
                           support_per_class=p1["support_per_class"],
                           query_per_class=p1["query_per_class"],
                           unlabeled_batch=p1["unlabeled_batch"],
                           max_grad_norm=p1["max_grad_norm"],
                           weight_decay=p1["weight_decay"],
                           momentum=p1["momentum"])
        log_path = self.paths.log("phase1.jsonl")
        _fresh(log_path)
        ssl.run_pseudo_label_phase(
            self.encoder, self.metric, X[self.split["labeled"]],
            y[self.split["labeled"]], X[self.split["unlabeled"]],
            sc, seed=cfg["seed"], log_fn=_jsonl_writer(log_path))
        save_network(enc_path, self.encoder)
        save_network(met_path, self.metric)

    # -- phases 2-3: SSL + consistency --------------------------------------
    def stage_ssl(self):
        cfg = self.cfg
        enc_path = self.paths.ck("encoder_ssl.net")
        if self.resume and os.path.exists(enc_path):
            self.encoder = load_network(enc_path)
            return
        X, y, _ = self._arrays()
        s = cfg["ssl"]
        sc = ssl.SSLConfig(iters=s["iters"], batch=s["batch"], tau=s["tau"],
                           tau_p=s["tau_p"], lam=s["lambda"],
                           lr_encoder=s["lr_encoder"],
                           injection_ratio=s["injection_ratio"],
                           max_grad_norm=s["max_grad_norm"],
                           weight_decay=s["weight_decay"],
                           momentum=s["momentum"])
        log_path = self.paths.log("ssl.jsonl")
        _fresh(log_path)
        metric = self.metric if cfg["use_metric"] else None
        ssl.run_ssl_phase(self.encoder, metric, X[self.split["labeled"]],
                          y[self.split["labeled"]],
                          X[self.split["unlabeled"]], sc,
                          seed=cfg["seed"], log_fn=_jsonl_writer(log_path))
        save_network(enc_path, self.encoder)

    def _embed(self, X):
        """Metric-scaled unit embedding of raw signals.

        Every training loss acts on distances between x/(||x|| E(x))
        vectors, so that space — not the raw encoder output, whose scale
        and common mode the losses never constrain — is where class
        structure lives.  All downstream consumers of features go
        through here.  Once the prior stage has fixed per-dimension
        standardization constants, they are applied so the identity
        scale matrix the prior fit starts from matches the data scale.
        """
        feats = encode(self.encoder, X, train=False)
        metric = self.metric if self.cfg["use_metric"] else None
        u, _ = scaled_unit(metric, feats, train=False)
        if self.feat_stats is not None:
            mu, sd = self.feat_stats
            u = (u - mu) / sd
        return u

    # -- phase 4: Bayesian prior -------------------------------------------
    def stage_prior(self):
        cfg = self.cfg
        prior_path = self.paths.ck("prior.json")
        stats_path = self.paths.ck("feature_stats.json")
        d = cfg["encoder"]["dim"]
        if (self.resume and os.path.exists(prior_path)
                and os.path.exists(stats_path)):
            with open(prior_path, "r", encoding="utf-8") as fh:
                self.prior = NIWParams.from_dict(json.load(fh))
            with open(stats_path, "r", encoding="utf-8") as fh:
                st = json.load(fh)
            self.feat_stats = (np.asarray(st["mean"]), np.asarray(st["std"]))
            return
        X, y, _ = self._arrays()
        lab = self.split["labeled"]
        train_idx = np.concatenate([lab, self.split["unlabeled"]])
        pool_u = self._embed(X[train_idx])
        mu = pool_u.mean(axis=0)
        sd = np.maximum(pool_u.std(axis=0), 1e-8)
        self.feat_stats = (mu, sd)
        with open(stats_path, "w", encoding="utf-8") as fh:
            json.dump({"mean": mu.tolist(), "std": sd.tolist()}, fh,
                      sort_keys=True)
        feats = self._embed(X[lab])
        labels = y[lab]
        classes = sorted(set(labels.tolist()))
        by_class = {c: feats[labels == c] for c in classes}
        min_count = min(v.shape[0] for v in by_class.values())
        if min_count < 2 or cfg["prior"]["iters"] == 0:
            self.prior = default_prior(d)
        else:
            def sampler(rng):
                n_cls = int(rng.integers(2, len(classes) + 1))
                chosen = rng.choice(classes, size=n_cls, replace=False)
                support, query = {}, {}
                for c in chosen:
                    F = by_class[int(c)]
                    perm = rng.permutation(F.shape[0])
                    k = int(rng.integers(1, min(5, F.shape[0] - 1) + 1))
                    support[int(c)] = F[perm[:k]]
                    query[int(c)] = F[perm[k:]]
                return support, query

            log_path = self.paths.log("prior.jsonl")
            _fresh(log_path)
            self.prior = meta_fit_prior(
                sampler, d, iters=cfg["prior"]["iters"],
                lr=cfg["prior"]["lr"],
                max_grad_norm=cfg["prior"]["max_grad_norm"],
                seed=cfg["seed"], log_fn=_jsonl_writer(log_path))
        with open(prior_path, "w", encoding="utf-8") as fh:
            json.dump(self.prior.to_dict(), fh, sort_keys=True)

    # -- filter --------------------------------------------------------------
    def _filter_pool(self, X, y):
        """Labeled samples plus confidently pseudo-labeled unlabeled ones.

        Unlabeled pool labels are never read; pseudo-labels come from
        prototype soft-assignment in the learned feature space and only
        assignments above the consistency threshold are kept.
        """
        cfg = self.cfg
        lab = self.split["labeled"]
        unl = self.split["unlabeled"]
        feats_lab = encode(self.encoder, X[lab])
        classes, P = ssl.class_prototypes(feats_lab, y[lab])
        pool_X = [X[lab]]
        pool_y = [y[lab]]
        if len(unl):
            feats_unl = encode(self.encoder, X[unl])
            metric = self.metric if cfg["use_metric"] else None
            D, _ = modified_distances(metric, feats_unl, P, train=False)
            assign = ssl.soft_assign(D)
            keep = assign.max(axis=1) > cfg["ssl"]["tau_p"]
            if np.any(keep):
                pool_X.append(X[unl][keep])
                pool_y.append(np.asarray(classes)[np.argmax(assign[keep], axis=1)])
        return np.concatenate(pool_X), np.concatenate(pool_y)

    def stage_filter(self):
        cfg = self.cfg
        head_path = self.paths.ck("filter_head.net")
        thr_path = self.paths.ck("thresholds.json")
        if self.resume and os.path.exists(head_path) and os.path.exists(thr_path):
            self.head = FilterHead.load(head_path)
            with open(thr_path, "r", encoding="utf-8") as fh:
                t = json.load(fh)
            self.thresholds = FilterThresholds(**t)
            return
        X, y, _ = self._arrays()
        f = cfg["filter"]
        weights = FilterWeights(omega_out=f["omega_out"],
                                omega_cal=f["omega_cal"],
                                lambda_t=f["lambda_t"],
                                lambda_out=f["lambda_out"],
                                alpha_in=f["alpha_in"])
        fc = TrainFilterConfig(
            outer_iters=f["outer_iters"], warmup_inner=f["warmup_inner"],
            n_tasks=f["n_tasks"], batch_in=f["batch_in"],
            batch_out=f["batch_out"], lr_inner=f["lr_inner"],
            lr_outer=f["lr_outer"], temperature=f["temperature"],
            lambda_align=f["lambda_align"],
            ood_percentile=f["ood_percentile"], weights=weights)
        pool_X, pool_y = self._filter_pool(X, y)
        log_path = self.paths.log("filter.jsonl")
        _fresh(log_path)
        self.head, self.thresholds, _ = train_filter(
            self.encoder, pool_X, pool_y, fc, seed=cfg["seed"],
            log_fn=_jsonl_writer(log_path))
        self.thresholds = FilterThresholds(
            tau_ood=self.thresholds.tau_ood,
            tau_c=cfg["thresholds"]["tau_c"])
        self.head.save(head_path)
        with open(thr_path, "w", encoding="utf-8") as fh:
            json.dump({"tau_ood": self.thresholds.tau_ood,
                       "tau_c": self.thresholds.tau_c}, fh, sort_keys=True)

    # -- evaluation ----------------------------------------------------------
    def _make_model(self):
        """Closure mapping raw support/query arrays to predictions."""
        cfg = self.cfg
        prior = self.prior
        kind = cfg["classifier"]

        def model(sup_X, sup_y, qry_X):
            fs = self._embed(sup_X)
            fq = self._embed(qry_X)
            if kind == "bayes":
                labels, _ = predict_bayes(prior, fs, sup_y, fq)
                return labels
            if kind in ("mle", "lda"):
                classes = sorted(set(int(c) for c in np.asarray(sup_y)))
                grouped = {c: fs[np.asarray(sup_y) == c] for c in classes}
                fit = qda_fit_mle if kind == "mle" else lda_fit
                params, priors = fit(grouped)
                return np.array([qda_decide(x, params, priors) for x in fq])
            if kind == "protonet":
                return protonet_baseline(fs, sup_y, fq)
            raise InvalidParameterError(f"unknown classifier '{kind}'")
        return model

    def _diagnose_fn(self, sup_X, sup_y):
        model = self._make_model()

        def diagnose(qry_X):
            return model(sup_X, sup_y, qry_X)
        return diagnose

    def stage_eval(self):
        cfg = self.cfg
        X, y, ids = self._arrays()
        lab, test = self.split["labeled"], self.split["test"]
        K = len(sorted(set(y.tolist())))
        max_n = cfg["eval"]["max_n"] or K
        n_tasks = cfg["eval"]["n_tasks"]
        model = self._make_model()

        if n_tasks > 0:
            summary = evaluate(model, X[test], y[test], max_n,
                               n_tasks=n_tasks, seed=cfg["seed"])
        else:
            summary = EvalSummary(mean_std_acc=float("nan"), ci95=float("nan"),
                                  n_tasks=0, per_task=[])

        # supervised episodic baseline on the labeled split only
        b = cfg["baseline"]
        base_enc = build_encoder(cfg["encoder"]["dim"], X.shape[1],
                                 seed=cfg["seed"] + 1)
        min_lab = min(int((y[lab] == c).sum())
                      for c in sorted(set(y[lab].tolist())))
        qpc = max(1, min(2, min_lab - 2))
        train_protonet_encoder(base_enc, X[lab], y[lab], iters=b["iters"],
                               lr=b["lr"], support_per_class=2,
                               query_per_class=qpc, seed=cfg["seed"])

        def base_model(sup_X, sup_y, qry_X):
            return protonet_baseline(encode(base_enc, sup_X, train=False),
                                     sup_y,
                                     encode(base_enc, qry_X, train=False))

        if n_tasks > 0:
            base_summary = evaluate(base_model, X[test], y[test], max_n,
                                    n_tasks=n_tasks, seed=cfg["seed"])
        else:
            base_summary = EvalSummary(mean_std_acc=float("nan"),
                                       ci95=float("nan"), n_tasks=0,
                                       per_task=[])

        # calibration on the one big task: all labeled support, test query
        _, probs = predict_bayes(
            self.prior, self._embed(X[lab]), y[lab],
            self._embed(X[test]))
        classes = sorted(set(y[lab].tolist()))
        preds = np.asarray(classes)[probs.argmax(axis=1)]
        records = [PredictionRecord(confidence=float(p.max()),
                                    predicted=int(pr), true=int(t))
                   for p, pr, t in zip(probs, preds, y[test])]
        M = cfg["calibration"]["bins"]
        bins = bin_reliability(records, M)
        ece_val = ece(bins, len(records))
        abce_val = abce(records, class_confidences(records, K), M,
                        v=cfg["calibration"]["v"])
        reliability_export(bins, self.paths.art("reliability.csv"))

        # OOD scores against synthetic negatives
        ood_rng = rng_for(cfg["seed"], "eval-ood")
        n_neg = max(20, len(test) // 2)
        neg = mk_ood_batch(X[lab], y[lab], n_neg, ood_rng)
        de_id, pm_id = ood_scores(self.head, X[test])
        de_out, pm_out = ood_scores(self.head, neg)
        de = np.concatenate([de_id, de_out])
        pm = np.concatenate([pm_id, pm_out])
        is_pos = np.concatenate([np.zeros(len(de_id), dtype=bool),
                                 np.ones(len(de_out), dtype=bool)])
        ood_block = {
            "auroc_diff_entropy": auroc(de, is_pos),
            "auroc_p_max": auroc(-pm, is_pos),
            "auroc_joint": auroc(joint_ood_score(de, pm), is_pos),
            "tau_ood": self.thresholds.tau_ood,
            "n_negatives": int(n_neg),
        }

        # rejection sweep on the big task
        diagnose = self._diagnose_fn(X[lab], y[lab])
        sweep = []
        for tau_c in cfg["thresholds"]["sweep"]:
            r = evaluate_rejection(diagnose, X[test], y[test], self.head,
                                   tau_c)
            r["tau_c"] = tau_c
            sweep.append(r)

        # filter decisions on the test split
        parts = filter_dataset(self.head, X[test], self.thresholds)
        decisions = np.full(len(test), "kept", dtype=object)
        decisions[np.isin(np.arange(len(test)), parts["rejected_ood"])] = \
            "rejected_ood"
        decisions[np.isin(np.arange(len(test)), parts["rejected_lowconf"])] = \
            "rejected_lowconf"
        write_filter_decisions(self.paths.art("filter_decisions.csv"),
                               [ids[i] for i in test],
                               parts["diff_entropy"], parts["p_max"],
                               decisions)

        # 2-component PCA of test features
        feats = self._embed(X[test])
        centered = feats - feats.mean(axis=0)
        U, S, Vt = np.linalg.svd(centered, full_matrices=False)
        signs = np.sign(Vt[np.arange(2), np.abs(Vt[:2]).argmax(axis=1)])
        coords = (U[:, :2] * S[:2]) * signs
        with open(self.paths.art("pca_coords.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write("sample_id,pc1,pc2,label\n")
            for i, idx in enumerate(test):
                fh.write(f"{ids[idx]},{coords[i, 0]:.10g},"
                         f"{coords[i, 1]:.10g},{int(y[idx])}\n")

        self.metrics = {
            "seed": cfg["seed"],
            "classifier": cfg["classifier"],
            "dataset": {
                "n_samples": int(X.shape[0]),
                "n_classes": K,
                "n_labeled": int(len(lab)),
                "n_unlabeled": int(len(self.split["unlabeled"])),
                "n_test": int(len(test)),
            },
            "eval": {
                "ubmf": summary.to_dict(),
                "protonet": base_summary.to_dict(),
            },
            "calibration": {"ece": ece_val, "abce": abce_val, "bins": M},
            "ood": ood_block,
            "rejection": sweep,
            "filter": {
                "n_kept": int(len(parts["kept"])),
                "n_rejected_ood": int(len(parts["rejected_ood"])),
                "n_rejected_lowconf": int(len(parts["rejected_lowconf"])),
            },
        }
        write_metrics(self.paths.art("metrics.json"), self.metrics)


def run_pipeline(cfg: dict, stages=None, resume: bool = False) -> dict:
    """Execute the requested stages in order; returns the metrics dict
    (empty when the eval stage was not requested)."""
    wanted = list(stages) if stages else list(STAGES)
    for s in wanted:
        if s not in STAGES:
            raise InvalidParameterError(f"unknown stage '{s}'")
    run = Run(cfg, resume=resume)
    fns = {"data": run.stage_data, "phase1": run.stage_phase1,
           "ssl": run.stage_ssl, "prior": run.stage_prior,
           "filter": run.stage_filter, "eval": run.stage_eval}
    # stages depend on earlier state; always execute prerequisites
    # (resume mode makes completed ones cheap loads)
    last = max(STAGES.index(s) for s in wanted)
    for s in STAGES[:last + 1]:
        try:
            fns[s]()
        except Exception as exc:
            raise StageFailure(s, exc) from exc
    return run.metrics


def report(run_dir: str) -> str:
    """Human-readable summary assembled purely from on-disk artifacts."""
    path = os.path.join(run_dir, "metrics.json")
    if not os.path.exists(path):
        raise InvalidParameterError(f"no metrics.json under {run_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        m = json.load(fh)
    lines = []
    ev = m["eval"]["ubmf"]
    bl = m["eval"]["protonet"]

    def fmt(x, nd=4):
        return "n/a" if x is None else f"{x:.{nd}f}"

    lines.append(f"episodes: {ev['n_tasks']}")
    lines.append(f"mean standardized accuracy: {fmt(ev['mean_std_acc'])} "
                 f"± {fmt(ev['ci95'])}")
    lines.append(f"protonet baseline:          {fmt(bl['mean_std_acc'])} "
                 f"± {fmt(bl['ci95'])}")
    cal = m["calibration"]
    lines.append(f"ECE: {fmt(cal['ece'])}   aBCE: {fmt(cal['abce'])} "
                 f"(M={cal['bins']})")
    ood = m["ood"]
    lines.append(f"OOD AUROC (diff-entropy): {fmt(ood['auroc_diff_entropy'])}"
                 f"   joint: {fmt(ood['auroc_joint'])}"
                 f"   p_max: {fmt(ood['auroc_p_max'])}")
    lines.append("rejection sweep:")
    lines.append("  tau_c   kept_fraction   accuracy")
    for row in m["rejection"]:
        lines.append(f"  {row['tau_c']:<7} {fmt(row['kept_fraction'])}"
                     f"          {fmt(row['accuracy'])}")
    return "\n".join(lines)
