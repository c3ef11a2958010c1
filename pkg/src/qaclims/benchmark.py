"""The shipped desk-scale benchmark: synthetic data, mock backends, fixed seeds.

``prepare`` builds everything the experiments share (dataset, corpus,
encoders and the classification-pretrained initialization); the other
functions train and evaluate from that common starting point. Run as
``python -m qaclims.benchmark --out DIR`` to print every table.
"""

from __future__ import annotations

import argparse
import copy
import logging
import time
from dataclasses import dataclass, field

import torch

from .datasets import load_samples
from .encoders import MockEncoders
from .evaluation import (
    DEFAULT_BG_THRESHOLD,
    corpus_matrix,
    evaluate_cams,
    fat_matrix,
    format_table,
    loss_matrix,
    run_ablation,
    sweep_omega,
)
from .model import CamNet
from .qape import MockVqaBackend, generate_corpus, load_templates
from .synthetic import generate_synthetic, lexicon_for, split_ids, vqa_scenes
from .training import TrainConfig, build_model, classification_accuracy, pretrain_classifier

log = logging.getLogger(__name__)

SWEEP_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass(frozen=True)
class BenchmarkSpec:
    n_train: int = 64
    n_eval: int = 16
    n_classes: int = 3
    seed: int = 7
    size: int = 64
    model_seed: int = 0
    # Same epoch budget for both stages; the higher rates suit the tiny backbone.
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.03, epochs=60, batch_size=8))
    ritc: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.003, epochs=60, batch_size=8))
    bg_threshold: float = DEFAULT_BG_THRESHOLD


@dataclass
class Bench:
    spec: BenchmarkSpec
    manifest: object
    train: list
    evals: list
    store: object
    encoders: MockEncoders
    init_state: dict
    pretrain_accuracy: float

    @property
    def n_classes(self):
        return len(self.manifest.classes)

    def model_factory(self):
        return CamNet(self.n_classes)

    def init_model(self):
        m = self.model_factory()
        m.load_state_dict(copy.deepcopy(self.init_state))
        return m


def prepare(out_dir, spec: BenchmarkSpec | None = None) -> Bench:
    spec = spec or BenchmarkSpec()
    manifest = generate_synthetic(spec.n_train + spec.n_eval, spec.n_classes, spec.seed, out_dir,
                                  size=spec.size, n_eval=spec.n_eval)
    samples = load_samples(manifest)
    train_ids = set(split_ids(manifest, "train"))
    train = [s for s in samples if s.image_id in train_ids]
    evals = [s for s in samples if s.image_id not in train_ids]
    backend = MockVqaBackend(load_templates(), vqa_scenes(manifest))
    store = generate_corpus([(s.image_id, s.image, s.labels) for s in samples], manifest.classes, backend)
    model = build_model(len(manifest.classes), spec.model_seed)
    pretrain_classifier(model, train, spec.pretrain)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Bench(spec, manifest, train, evals, store, MockEncoders(lexicon_for(manifest)), state,
                 classification_accuracy(model, train))


def evaluate(bench: Bench, model):
    return evaluate_cams(model, bench.evals, bench.n_classes, bench.spec.bg_threshold, sweep=SWEEP_THRESHOLDS)


def pretrained_report(bench: Bench):
    return evaluate(bench, bench.init_model())


def ablation(bench: Bench, matrix):
    return run_ablation(matrix, bench.init_state, bench.model_factory, bench.store, bench.train, bench.evals,
                        bench.spec.ritc, bench.encoders, bench.n_classes, bench.spec.bg_threshold)


def loss_ablation(bench: Bench):
    return ablation(bench, loss_matrix())


def corpus_ablation(bench: Bench, names=None):
    cells = corpus_matrix()
    if names is not None:
        cells = [c for c in cells if c.name in names]
    return ablation(bench, cells)


def omega_sweep(bench: Bench, omegas=(0.0, 0.1, 0.3, 0.5)):
    return sweep_omega(list(omegas), bench.init_state, bench.model_factory, bench.store, bench.train,
                       bench.evals, bench.spec.ritc, bench.encoders, bench.n_classes, bench.spec.bg_threshold)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="python -m qaclims.benchmark", description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="directory for the synthetic dataset")
    parser.add_argument("--tables", default="loss,corpus,fat,omega",
                        help="comma-separated subset of loss,corpus,fat,omega")
    args = parser.parse_args(argv)
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    bench = prepare(args.out)
    pre = pretrained_report(bench)
    print(f"pretrained: train accuracy {bench.pretrain_accuracy:.3f}, CAM mIoU {100 * pre.miou:.2f} "
          f"(best threshold {pre.extra['best_bg_threshold']:.2f}: {100 * pre.extra['best_miou']:.2f})")
    wanted = set(args.tables.split(","))
    for name, matrix in (("loss", loss_matrix), ("corpus", corpus_matrix), ("fat", fat_matrix)):
        if name in wanted:
            print(format_table(ablation(bench, matrix()), title=f"{name} ablation"))
    if "omega" in wanted:
        for w, m in omega_sweep(bench):
            print(f"omega {w:.2f}: mIoU {100 * m:.2f}")
    print(f"elapsed {time.perf_counter() - t0:.0f} s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
