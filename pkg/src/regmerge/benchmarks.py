"""Checked-in seeded benchmarks and the expectations file they produce.

The expectations file (expectations/benchmarks.json at the repo root) is
generated by `build_expectations()` and compared by the test suite; rebuild
it with `python -m regmerge.benchmarks <path>` after an intentional change.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from .data import DomainShift, PartitionSpec, SyntheticTask
from .harness import BenchConfig, MultiDomainBench, default_merge_configs, run_noniid_experiment
from .merge import MergeConfig
from .stats import CollectConfig
from .zoo import ModelSpec, TrainConfig

DEFAULT_EXPECTATIONS = Path(__file__).resolve().parents[2] / "expectations" / "benchmarks.json"

_MLP = ModelSpec(architecture="mlp", input_dim=8, num_classes=3, hidden_dim=16)
_TRAIN = TrainConfig(lr=0.1, epochs=12, batch_size=32, seed=100)
_COLLECT = CollectConfig(batch_size=16, max_batches=1000)


def noniid_benchmark():
    """Two label-skewed partitions of one blob task, 1000 examples each.

    Training is kept short and the key-class skew strong so each partition
    model stays visibly biased; that is the regime where merging pays off.
    """
    task = SyntheticTask(generator="gaussian_blobs", input_dim=8, num_classes=5,
                         sizes=(4000, 300, 800), seed=7)
    part_spec = PartitionSpec(key_class="random", key_fraction=0.95,
                              partition_size=1000, seed=11)
    model = ModelSpec(architecture="mlp", input_dim=8, num_classes=5,
                      hidden_dim=16)
    train = TrainConfig(lr=0.05, epochs=4, batch_size=32, seed=100)
    cfg = BenchConfig(model=model, train=train, collect=_COLLECT, seed=3)
    return task, part_spec, cfg


def multidomain_tasks():
    """Four shifted blob domains plus two held-out OOD tasks."""
    base = dict(generator="gaussian_blobs", input_dim=8, num_classes=3,
                sizes=(600, 200, 400))
    domains = [
        SyntheticTask(**base, domain_shift=DomainShift(), seed=21),
        SyntheticTask(**base, domain_shift=DomainShift(mean_offset=(1.5, -1.0)),
                      seed=22),
        SyntheticTask(**base, domain_shift=DomainShift(rotation=0.7), seed=23),
        SyntheticTask(**base, domain_shift=DomainShift(mean_offset=(-1.0, 0.5),
                                                       class_priors=(0.6, 0.25, 0.15)),
                      seed=24),
    ]
    ood = [
        SyntheticTask(**base, domain_shift=DomainShift(mean_offset=(0.8, 0.8),
                                                       rotation=0.35), seed=31),
        SyntheticTask(**base, domain_shift=DomainShift(rotation=-0.5), seed=32),
    ]
    return domains, ood


def multidomain_bench(seed: int = 5) -> MultiDomainBench:
    domains, ood = multidomain_tasks()
    cfg = BenchConfig(model=_MLP, train=_TRAIN, collect=_COLLECT, seed=seed)
    return MultiDomainBench(domains, ood, cfg)


def greedy_adversarial_bench(seed: int = 5) -> MultiDomainBench:
    """Same bench with the last domain's labels flipped; its model should be
    rejected when greedily merging against the clean OOD validation sets."""
    domains, ood = multidomain_tasks()
    cfg = BenchConfig(model=_MLP, train=_TRAIN, collect=_COLLECT, seed=seed)
    return MultiDomainBench(domains, ood, cfg, label_flip=[len(domains) - 1])


ALPHA_GRID = [round(0.1 * k, 1) for k in range(1, 11)]
BATCH_GRID = [1, 10, 100, 10**9]


def build_expectations() -> dict:
    task, part_spec, noniid_cfg = noniid_benchmark()
    noniid = run_noniid_experiment(task, part_spec, default_merge_configs(), noniid_cfg)

    bench = multidomain_bench()
    multi = bench.run(default_merge_configs())
    pairwise = bench.pairwise_drop(default_merge_configs())
    alpha = bench.sweep_alpha(ALPHA_GRID)
    batches = bench.sweep_batches(BATCH_GRID)

    adv = greedy_adversarial_bench()
    greedy = adv.greedy(MergeConfig(algorithm="simple"), use_ood_val=True)

    return {
        "noniid": noniid.to_json_dict(),
        "multidomain": multi.to_json_dict(),
        "pairwise_drop": pairwise.to_json_dict(),
        "sweep_alpha": alpha.to_json_dict(),
        "sweep_batches": batches.to_json_dict(),
        "greedy_adversarial": greedy.to_json_dict(),
    }


def load_expectations(path=DEFAULT_EXPECTATIONS) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else DEFAULT_EXPECTATIONS
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(build_expectations(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
