"""Assemble the toy setting: vocabulary, domains, templates, a pretrained
target and cause/iso splits, all derived from one master seed."""
from __future__ import annotations

from dataclasses import dataclass, field

from hyperdas.ravel import (DomainSpec, RavelExample, SplitManifest, TemplateSet, Vocab,
                            build_domain, build_templates, fact_corpus, generate_examples,
                            target_corpus)
from hyperdas.seeds import sub_seed
from hyperdas.target import PretrainReport, TargetConfig, TinyDecoder, pretrain_target


@dataclass
class WorldConfig:
    seed: int = 0
    domains: list[DomainSpec] = field(default_factory=lambda: [DomainSpec("city")])
    n_train_templates: int = 24
    n_test_templates: int = 8
    train_per_cell: int = 512
    test_per_cell: int = 128
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    pretrain_steps: int = 1500
    pretrain_lr: float = 3e-3
    fact_steps: int = 1000
    exit_layer: int = 3


@dataclass
class World:
    cfg: WorldConfig
    vocab: Vocab
    domains: list
    templates: TemplateSet
    train: list[RavelExample]
    test: list[RavelExample]
    manifest: SplitManifest

    @property
    def attributes(self) -> list[str]:
        return [a for d in self.domains for a in d.attributes]

    def target_config(self) -> TargetConfig:
        longest = max(len(e.base) for e in self.train + self.test)
        longest = max([longest] + [len(e.counterfactual) for e in self.train + self.test])
        return TargetConfig(vocab_size=len(self.vocab), d_model=self.cfg.d_model,
                            n_layers=self.cfg.n_layers, n_heads=self.cfg.n_heads,
                            max_seq_len=max(16, longest))


def build_world(cfg: WorldConfig) -> World:
    vocab = Vocab()
    domains = [build_domain(sub_seed(cfg.seed, f"domain/{s.name}"), s, vocab) for s in cfg.domains]
    templates = build_templates(sub_seed(cfg.seed, "templates"), cfg.n_train_templates,
                                cfg.n_test_templates)
    examples, manifest = generate_examples(domains, templates,
                                           {"train": cfg.train_per_cell, "test": cfg.test_per_cell},
                                           sub_seed(cfg.seed, "examples"))
    train = [e for e in examples if e.split == "train"]
    test = [e for e in examples if e.split == "test"]
    return World(cfg, vocab, domains, templates, train, test, manifest)


def pretrained_target(world: World, strict: bool = True) -> tuple[TinyDecoder, PretrainReport]:
    """Pretrain the target on train-template facts and queries; test on held-out templates."""
    model = TinyDecoder(world.target_config(), seed=sub_seed(world.cfg.seed, "target"))
    cfg = world.cfg
    train = target_corpus(world.domains, world.templates.train, world.vocab)
    test = target_corpus(world.domains, world.templates.test, world.vocab)
    facts = fact_corpus(world.domains, world.templates.train, world.vocab) if cfg.fact_steps else None
    report = pretrain_target(model, train, test, steps=cfg.pretrain_steps, lr=cfg.pretrain_lr,
                             seed=sub_seed(cfg.seed, "pretrain"), strict=strict, facts=facts,
                             fact_steps=cfg.fact_steps, exit_layer=cfg.exit_layer)
    return model, report
