"""Cached experiment pipeline.

Stages: fetch -> train -> trusted -> sign -> attack -> calibrate -> evaluate,
plus the epsilon sweep and the adaptive-attack round trip. Each stage writes
its artifact under ``<out>/artifacts`` with a name derived from the hash of
everything it depends on, so reruns reuse work and identical configs give
identical files.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attacks as A
from . import cams, data, nn, store
from .calibrate import CalibrationSet, ThresholdSet, calibrate_all_classes, calibrate_global, recalibrate_with_adaptive
from .config import AttackEntry, ExperimentConfig
from .report import SAFE_ROW, DetectionReport

log = logging.getLogger(__name__)

EXIT_CODES = {"config": 2, "fetch": 10, "train": 11, "trusted": 12, "sign": 13, "attack": 14, "calibrate": 15,
              "evaluate": 16, "bench": 17, "sweep": 18, "adaptive": 19}
BASELINES = ("VisionGuard", "FeatureSqueezing")
CHUNK = 500


class StageError(RuntimeError):
    def __init__(self, stage, cause, artifacts=()):
        where = "; cached artifacts: " + ", ".join(str(a) for a in artifacts) if artifacts else ""
        super().__init__(f"stage {stage!r} failed: {cause}{where}")
        self.stage, self.cause, self.artifacts = stage, cause, list(artifacts)

    @property
    def exit_code(self):
        return EXIT_CODES.get(self.stage, 1)


def _slug(text):
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")


def _digest(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def split_counts(available: int, calibration: int, evaluation: int) -> tuple[int, int]:
    """Shrink (calibration, evaluation) proportionally when fewer samples exist."""
    want = calibration + evaluation
    if available >= want:
        return calibration, evaluation
    cal = (available * calibration) // want if want else 0
    return cal, available - cal


@dataclass
class UnsafeSet:
    name: str
    images: np.ndarray
    predicted: np.ndarray
    n_cal: int
    n_eval: int
    requested: tuple

    @property
    def calibration(self):
        return self.images[:self.n_cal]

    @property
    def evaluation(self):
        return self.images[self.n_cal:self.n_cal + self.n_eval]


def _generate_chunk(args):
    model, cfg, images, labels, index, sig = args
    import torch

    torch.set_num_threads(1)
    return A.generate(model, cfg, images, labels, index, sig)


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out, workers: int = 1, cache_dir=None):
        self.cfg = cfg
        self.out = Path(out)
        self.art = self.out / "artifacts"
        self.art.mkdir(parents=True, exist_ok=True)
        self.workers = max(1, int(workers))
        self.cache_dir = cache_dir
        self._mem = {}

    # ------------------------------------------------------------ plumbing
    @contextlib.contextmanager
    def stage(self, name):
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            arts = sorted(p.name for p in self.art.iterdir()) if self.art.exists() else []
            raise StageError(name, exc, arts) from exc

    def _cached(self, key, fn):
        if key not in self._mem:
            self._mem[key] = fn()
        return self._mem[key]

    # ---------------------------------------------------------------- data
    def splits(self):
        def load():
            with self.stage("fetch"):
                return data.fetch_dataset(self.cfg.dataset, self.cache_dir)
        return self._cached("splits", load)

    @property
    def model_path(self):
        return self.art / f"model-{self.cfg.model_key}.cvsg"

    def model(self) -> nn.NetworkModel:
        def load():
            if self.model_path.exists():
                return store.read_model(self.model_path)
            train, test = self.splits()
            with self.stage("train"):
                model = nn.build_lenet4(10, seed=self.cfg.seed)
                t0 = time.perf_counter()
                nn.train(model, train.images, train.labels, self.cfg.train)
                secs = time.perf_counter() - t0
                acc = nn.evaluate_accuracy(model, test.images, test.labels)
                log.info("test accuracy %.4f after %.0f s", acc, secs)
                store.write_model(model, self.model_path,
                                  {"test_accuracy": acc, "dataset": self.cfg.dataset, "train_seconds": secs})
            return model
        return self._cached("model", load)

    def test_accuracy(self) -> float:
        self.model()
        return store.model_meta(self.model_path)["test_accuracy"]

    def trusted(self) -> tuple[data.TrustedSet, data.TrustedSet]:
        """(trusted set from train, trusted test set)."""
        def load():
            path = self.art / f"trusted-{self.cfg.trusted_key}.npz"
            train, test = self.splits()
            model = self.model()
            with self.stage("trusted"):
                if path.exists():
                    z = np.load(path)
                    tr_idx, te_idx = z["train"], z["test"]
                else:
                    tr_idx = data.select_trusted(model, train, self.cfg.score_threshold).source_index
                    te_idx = data.select_trusted_test(model, test, self.cfg.score_threshold,
                                                      self.cfg.test_cap).source_index
                    np.savez(path, train=tr_idx, test=te_idx)
                mk = lambda s, i: data.TrustedSet(s.images[i], s.labels[i], i, model.class_count,  # noqa: E731
                                                  self.cfg.score_threshold)
                return mk(train, tr_idx), mk(test, te_idx)
        return self._cached("trusted", load)

    def safe_sets(self):
        _, tt = self.trusted()
        c, e = self.cfg.safe_calibration, self.cfg.safe_evaluation
        return tt.images[:c], tt.images[c:c + e]

    # ----------------------------------------------------------- signatures
    def signature_path(self, cam: cams.CamSpec, taps=None) -> Path:
        taps = tuple(sorted(taps or self.cfg.taps))
        key = self.cfg.key("sig", self.cfg.trusted_key, cam.label, taps)
        return self.art / f"sig-{_slug(cam.label)}-{'-'.join(map(str, taps))}-{key}.cvsg"

    def signature(self, cam: cams.CamSpec, taps=None):
        taps = tuple(sorted(taps or self.cfg.taps))

        def load():
            path = self.signature_path(cam, taps)
            if not path.exists():
                ts, _ = self.trusted()
                model = self.model()
                with self.stage("sign"):
                    if cam.kind == "knnc":
                        store.write_knnc_streaming(path, model, ts.images, ts.labels, taps, cam.param)
                    else:
                        ranges = self.signature(cams.CamSpec("src"), taps) if cam.kind == "mrc" else None
                        sig = cams.aggregate(cam, ts.images, ts.labels, model, taps, ranges=ranges)
                        store.write_signature(sig, path)
            with self.stage("sign"):
                sig, _ = store.read_signature(path, mmap=True, verify=cam.kind != "knnc")
            return sig
        return self._cached(("sig", cam, taps), load)

    # -------------------------------------------------------------- attacks
    def _pool(self, source):
        train, _ = self.splits()
        _, tt = self.trusted()
        if source == "train":
            return train.images, train.labels, np.arange(len(train))
        return tt.images, tt.labels, tt.source_index

    def _generate_until(self, cfg: A.AttackConfig, need: int, source="test", sig=None) -> A.AdversarialSet:
        """Attack the pool chunk by chunk until ``need`` samples pass the wrong-score filter."""
        model = self.model()
        images, labels, index = self._pool(source)
        starts = list(range(0, len(images), CHUNK))
        kept, attempted = [], 0
        have = 0
        ex = ProcessPoolExecutor(self.workers) if self.workers > 1 else None
        try:
            for w in range(0, len(starts), self.workers):
                wave = starts[w:w + self.workers]
                args = [(model, cfg, images[s:s + CHUNK], labels[s:s + CHUNK], index[s:s + CHUNK], sig) for s in wave]
                results = list(ex.map(_generate_chunk, args)) if ex else [_generate_chunk(a) for a in args]
                for res in results:
                    if have >= need:
                        break
                    attempted += len(res)
                    acc = res.accepted(cfg.wrong_score)[:need - have]
                    kept.append(res.subset(acc))
                    have += len(acc)
                if have >= need:
                    break
        finally:
            if ex:
                ex.shutdown()
        if kept:
            first = kept[0]
            out = A.AdversarialSet(np.concatenate([k.images for k in kept]), np.concatenate([k.source_index for k in kept]),
                                   np.concatenate([k.source_label for k in kept]),
                                   np.concatenate([k.predicted for k in kept]), np.concatenate([k.score for k in kept]),
                                   first.method, first.config_hash)
        else:
            out = A.AdversarialSet(np.zeros((0, 28, 28), np.float32), *(np.zeros(0, np.int64) for _ in range(3)),
                                   np.zeros(0), cfg.method, cfg.digest())
        out.meta = {"attempted": attempted, "requested": need}
        if have < need:
            log.warning("%s: only %d of %d requested samples after %d attempts", cfg.method, have, need, attempted)
        return out

    def adversarial(self, entry: AttackEntry, sig=None, extra_key=()) -> A.AdversarialSet:
        need = entry.calibration + entry.evaluation
        key = self.cfg.key("adv", self.cfg.trusted_key, entry.attack, entry.source, need, *extra_key)
        path = self.art / f"adv-{_slug(entry.name)}-{key}.cvsg"

        def load():
            with self.stage("attack"):
                if path.exists():
                    return A.read_adversarial(path)
                adv = self._generate_until(entry.attack, need, entry.source, sig)
                A.write_adversarial(adv, path, entry.attack)
                return adv
        return self._cached(("adv", path.name), load)

    def unsafe_set(self, entry: AttackEntry) -> UnsafeSet:
        adv = self.adversarial(entry)
        n_cal, n_eval = split_counts(len(adv), entry.calibration, entry.evaluation)
        if (n_cal, n_eval) != (entry.calibration, entry.evaluation):
            log.warning("%s: counts shrunk to %d/%d (requested %d/%d)", entry.name, n_cal, n_eval,
                        entry.calibration, entry.evaluation)
        return UnsafeSet(entry.name, adv.images, adv.predicted, n_cal, n_eval, (entry.calibration, entry.evaluation))

    def generate_all(self):
        return [self.unsafe_set(e) for e in self.cfg.attacks]

    # ----------------------------------------------------------- monitoring
    def costs(self, cam: cams.CamSpec, images, taps=None):
        """(eta, predicted class) of ``images`` under the CAM; cached on disk."""
        taps = tuple(sorted(taps or self.cfg.taps))
        sig = self.signature(cam, taps)
        key = self.cfg.key("eta", self.signature_path(cam, taps).name, _digest(images))
        path = self.art / f"eta-{_slug(cam.label)}-{key}.npz"
        if path.exists():
            z = np.load(path)
            return z["eta"], z["pred"]
        model = self.model()
        etas, preds = [], []
        for s in range(0, len(images), 2000):
            res = nn.forward(model, images[s:s + 2000], taps)
            preds.append(res.predicted)
            etas.append(cams.coverage_cost(res.taps, sig, res.predicted))
        eta = np.concatenate(etas) if etas else np.zeros(0)
        pred = np.concatenate(preds) if preds else np.zeros(0, np.int64)
        np.savez(path, eta=eta, pred=pred)
        return eta, pred

    def calibration_set(self, cam, taps=None) -> CalibrationSet:
        safe_cal, _ = self.safe_sets()
        s_eta, s_pred = self.costs(cam, safe_cal, taps)
        u = [self.costs(cam, us.calibration, taps) for us in self.generate_all() if us.n_cal]
        u_eta = np.concatenate([e for e, _ in u]) if u else np.zeros(0)
        u_pred = np.concatenate([p for _, p in u]) if u else np.zeros(0, np.int64)
        return CalibrationSet.from_parts(s_eta, s_pred, u_eta, u_pred)

    def thresholds(self, cam, taps=None) -> ThresholdSet:
        taps = tuple(sorted(taps or self.cfg.taps))

        def load():
            path = self.signature_path(cam, taps).with_suffix(".thresholds.txt")
            if path.exists():
                return ThresholdSet.from_text(path.read_text())
            sig = self.signature(cam, taps)
            cal = self.calibration_set(cam, taps)
            with self.stage("calibrate"):
                th = calibrate_all_classes(cal, sig.class_count, cam.label, cam.sense, store.fingerprint(sig))
                path.write_text(th.to_text())
                if cam.kind != "knnc":  # large kNNC files keep thresholds in the text export only
                    store.write_signature(sig, self.signature_path(cam, taps), th)
            return th
        return self._cached(("thr", cam, taps), load)

    def baseline_scores(self, name, images):
        key = self.cfg.key("base", self.cfg.model_key, name, _digest(images))
        path = self.art / f"base-{_slug(name)}-{key}.npy"
        if path.exists():
            return np.load(path)
        model = self.model()
        fn = A.vision_guard_score if name == "VisionGuard" else A.feature_squeezing_score
        score = np.concatenate([fn(model, images[s:s + 2000]) for s in range(0, len(images), 2000)]) \
            if len(images) else np.zeros(0)
        np.save(path, score)
        return score

    def baseline_threshold(self, name) -> float:
        def load():
            safe_cal, _ = self.safe_sets()
            unsafe = [us.calibration for us in self.generate_all() if us.n_cal]
            s = self.baseline_scores(name, safe_cal)
            u = np.concatenate([self.baseline_scores(name, x) for x in unsafe]) if unsafe else np.zeros(0)
            with self.stage("calibrate"):
                tau, _ = calibrate_global(np.r_[s, u], np.r_[np.zeros(len(s), bool), np.ones(len(u), bool)])
            return tau
        return self._cached(("base-thr", name), load)

    # ------------------------------------------------------------ reporting
    def _score_row(self, rep, row, images, cam, th, taps):
        eta, pred = self.costs(cam, images, taps)
        safe = cams.is_safe(eta, th.tau[pred], cam.sense)
        rep.add(row, cam.label, int(safe.sum()), int((~safe).sum()))

    def _score_baseline_row(self, rep, row, images, name):
        unsafe = A.baseline_unsafe(self.baseline_scores(name, images), self.baseline_threshold(name))
        rep.add(row, name, int((~unsafe).sum()), int(unsafe.sum()))

    def rows(self, extra=()):
        out = [(us.name, us.evaluation) for us in self.generate_all()]
        out += list(extra)
        out.append((SAFE_ROW, self.safe_sets()[1]))
        return out

    def evaluate(self, taps=None, thresholds=None, extra_rows=(), cam_list=None, baselines=None) -> DetectionReport:
        """Detection accuracy per input type and detector on the evaluation halves."""
        cam_list = cam_list or self.cfg.cams
        baselines = self.cfg.baselines if baselines is None else baselines
        rows = self.rows(extra_rows)
        rep = DetectionReport(rows=[r for r, _ in rows])
        for cam in cam_list:
            th = (thresholds or {}).get(cam.label) or self.thresholds(cam, taps)
            with self.stage("evaluate"):
                for row, images in rows:
                    self._score_row(rep, row, images, cam, th, taps)
        if baselines:
            for name in BASELINES:
                with self.stage("evaluate"):
                    for row, images in rows:
                        self._score_baseline_row(rep, row, images, name)
        return rep

    def run(self, taps=None) -> DetectionReport:
        self.model()
        self.trusted()
        for cam in self.cfg.cams:
            self.signature(cam, taps)
        self.generate_all()
        return self.evaluate(taps)

    # ----------------------------------------------------------------- sweep
    def epsilon_sweep(self, eps_list=None) -> list[dict]:
        """FGSM over the whole test split per eps: mean SRC cost, mean confidence, AE fraction."""
        eps_list = self.cfg.sweep_eps if eps_list is None else eps_list
        _, test = self.splits()
        model = self.model()
        cam = cams.CamSpec("src")
        th = self.thresholds(cam)
        out = []
        with self.stage("sweep"):
            for eps in eps_list:
                entry = AttackEntry(f"sweep {eps}", A.AttackConfig("fgsm", eps=eps, seed=self.cfg.seed), 0, 0)
                key = self.cfg.key("sweep", self.cfg.model_key, entry.attack)
                path = self.art / f"sweep-{key}.npy"
                if path.exists():
                    adv = np.load(path)
                else:
                    adv = np.concatenate([A.fgsm(model, test.images[s:s + 2000], test.labels[s:s + 2000], eps)
                                          for s in range(0, len(test), 2000)])
                    np.save(path, adv)
                eta, pred = self.costs(cam, adv)
                c = cams.confidence_from_cost(eta, th.tau[pred])
                out.append({"eps": float(eps), "mean_cost": float(eta.mean()), "mean_confidence": float(c.mean()),
                            "ae_fraction": float(np.mean(pred != test.labels)), "samples": len(test)})
        return out

    # -------------------------------------------------------------- adaptive
    def adaptive_sets(self) -> dict:
        """Signature-attack samples per gamma: (recalibration part, test part)."""
        ad = self.cfg.adaptive
        sig = self.signature(cams.CamSpec("src"))
        per_recal = ad.recalibration_samples // max(1, len(ad.recalibration_gammas))
        out = {}
        for g in ad.gammas:
            n_rec = per_recal if g in ad.recalibration_gammas else 0
            cfg = A.AttackConfig("signature", eps=ad.eps, alpha=ad.alpha, k=ad.k, gamma=g, seed=self.cfg.seed)
            entry = AttackEntry(f"Signature-Attack (gamma={g})", cfg, n_rec, ad.test_samples)
            with self.stage("adaptive"):
                adv = self.adversarial(entry, sig, extra_key=(self.signature_path(cams.CamSpec("src")).name,))
            n_cal, n_eval = split_counts(len(adv), n_rec, ad.test_samples)
            out[g] = (adv.images[:n_cal], adv.images[n_cal:n_cal + n_eval], len(adv))
        return out

    def adaptive_roundtrip(self) -> tuple[DetectionReport, DetectionReport, dict]:
        ad = self.cfg.adaptive
        sets = self.adaptive_sets()
        extra = [(f"Signature-Attack (gamma={g})", sets[g][1]) for g in ad.gammas]
        before = self.evaluate(extra_rows=extra, cam_list=ad.cams, baselines=False)
        new = {}
        for cam in ad.cams:
            th = self.thresholds(cam)
            parts = [self.costs(cam, sets[g][0]) for g in ad.gammas if len(sets[g][0])]
            a_eta = np.concatenate([e for e, _ in parts]) if parts else np.zeros(0)
            a_pred = np.concatenate([p for _, p in parts]) if parts else np.zeros(0, np.int64)
            with self.stage("adaptive"):
                if len(a_eta):
                    new[cam.label] = recalibrate_with_adaptive(self.calibration_set(cam), a_eta, a_pred,
                                                               len(th.tau), cam.label, cam.sense, th.fingerprint)
                else:
                    new[cam.label] = th
        after = self.evaluate(thresholds=new, extra_rows=extra, cam_list=ad.cams, baselines=False)
        return before, after, new
