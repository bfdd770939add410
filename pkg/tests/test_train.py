import numpy as np
import pytest

from hyperdas.autodiff import ContractError
from hyperdas.evaluate import evaluate
from hyperdas.model import ABLATIONS
from hyperdas.pipeline import WorldConfig, build_world
from hyperdas.ravel import DomainSpec
from hyperdas.seeds import sub_seed
from hyperdas.train import (TrainConfig, run_ablation, schedule_lambda, train, train_all_domains,
                            union_size)


def test_lambda_schedule():
    assert schedule_lambda(0, 1000) == 0.0
    assert schedule_lambda(499, 1000) == 0.0
    assert schedule_lambda(500, 1000) == 0.0
    assert schedule_lambda(750, 1000) == pytest.approx(0.75)
    assert schedule_lambda(1000, 1000) == pytest.approx(1.5)
    values = [schedule_lambda(s, 200) for s in range(201)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    with pytest.raises(ContractError):
        schedule_lambda(1001, 1000)


def test_sub_seeds_are_stable_and_distinct():
    assert sub_seed(0, "init") == sub_seed(0, "init")
    assert len({sub_seed(0, n) for n in ("init", "shuffle", "flip", "union")}) == 4
    assert sub_seed(0, "init") != sub_seed(1, "init")


def _cfg(**kw):
    base = dict(layer=2, rank=4, steps=30, batch_size=8, n_blocks=1, n_heads=2, score_heads=2, lr=3e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_training_lowers_the_loss(small_world):
    world, target = small_world
    _, record = train(target, world.vocab, world.attributes, world.train, _cfg(steps=200, lambda_max=0.0))
    losses = [m["ravel"] for m in record.steps]
    assert len(losses) == 200
    assert np.mean(losses[-40:]) < np.mean(losses[:40])


def test_target_stays_frozen(small_world):
    world, target = small_world
    before = target.param_hash()
    train(target, world.vocab, world.attributes, world.train, _cfg(steps=5))
    assert target.param_hash() == before
    assert all(not p.requires_grad for p in target.parameters())


@pytest.mark.parametrize("mode", ABLATIONS)
def test_every_ablation_mode_trains_and_reports(small_world, mode):
    world, target = small_world
    model, record = run_ablation(target, world.vocab, world.attributes, world.train,
                                 _cfg(steps=3, ablation=mode), test_set=world.test[:16])
    assert len(record.steps) == 3 and np.isfinite(record.final_loss)
    assert record.evals[-1]["split"] == "test"
    assert 0.0 <= record.evals[-1]["snapped"]["disentangle"] <= 1.0


def test_unknown_ablation_rejected(small_world):
    world, target = small_world
    with pytest.raises(ContractError):
        run_ablation(target, world.vocab, world.attributes, world.train, _cfg(ablation="nope"))


def test_same_seed_same_run(small_world):
    world, target = small_world
    runs = []
    for _ in range(2):
        model, record = train(target, world.vocab, world.attributes, world.train, _cfg(steps=10))
        res = evaluate(model, world.test[:16], world.vocab)
        runs.append(([m["loss"] for m in record.steps], res.snapped.to_dict()))
    assert runs[0] == runs[1]
    _, other = train(target, world.vocab, world.attributes, world.train, _cfg(steps=10, seed=1))
    assert [m["loss"] for m in other.steps] != runs[0][0]


def test_best_checkpoint_is_restored(small_world):
    world, target = small_world
    _, record = train(target, world.vocab, world.attributes, world.train, _cfg(steps=20, eval_every=10),
                      val_set=world.test[:16])
    assert [e["step"] for e in record.evals] == [10, 20]


def test_train_all_domains():
    from hyperdas.pipeline import pretrained_target

    cfg = WorldConfig(seed=1, domains=[DomainSpec("city", n_entities=8), DomainSpec("river", n_entities=8)],
                      n_train_templates=3, n_test_templates=2, train_per_cell=4, test_per_cell=2,
                      d_model=16, n_layers=3, n_heads=2, pretrain_steps=5, fact_steps=0)
    world = build_world(cfg)
    target, _ = pretrained_target(world, strict=False)
    by_domain = {d.name: [e for e in world.train if e.target_attribute in d.attributes] for d in world.domains}
    tests = {d.name: [e for e in world.test if e.target_attribute in d.attributes] for d in world.domains}
    assert union_size(by_domain) == len(world.train)
    _, record, per_domain = train_all_domains(target, world.vocab, by_domain, world.attributes,
                                              _cfg(steps=3), tests)
    assert set(per_domain) == {"city", "river"}
    assert {e["domain"] for e in record.evals} == {"city", "river"}
    with pytest.raises(ContractError):
        train_all_domains(target, world.vocab, {"city": by_domain["city"]}, world.attributes, _cfg())
