import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

import oracles
from scn.backbone import load_checkpoint
from scn.config import RunConfig
from scn.corpus import GT_GUARD, build_vocabulary, generate_synthetic_corpus, pair_records
from scn.objective import (
    assign_rewards, clone_state, forward_losses, init_state, learning_rate, multi_task_loss,
    rank_loss, train, train_step,
)

TINY = dict(n_videos=6, min_frames=16, max_frames=20, feature_dim=4, d_model=16, layers=1,
            heads=2, dropout=0.0, ratios=(0.25, 0.5), batch_size=3, epochs=2, lr_max=1e-3,
            warmup=5)


def tiny_setup(**kw):
    cfg = RunConfig().replace(**{**TINY, **kw})
    pairs = pair_records(*generate_synthetic_corpus(cfg.corpus_config()))
    vocab = build_vocabulary((q.tokens for _, q in pairs), cfg.vocab_size)
    return cfg, pairs, vocab


# -- rewards ---------------------------------------------------------------------


def test_reward_examples():
    assert assign_rewards([3.0, 1.0, 2.0, 4.0]).tolist() == pytest.approx([1 / 3, 1, 2 / 3, 0])
    assert assign_rewards([5, 5]).tolist() == [1.0, 0.0]
    assert assign_rewards([3.0, 1.0, 2.0, 4.0], "onehot").tolist() == [0, 1, 0, 0]


@given(st.lists(st.floats(0, 20, allow_nan=False), min_size=2, max_size=8))
def test_rewards_are_the_ladder(losses):
    r = assign_rewards(losses)
    k = len(losses)
    assert sorted(r.tolist()) == [j / (k - 1) for j in range(k)]
    assert r.tolist() == oracles.ladder(losses)


def test_random_six_matches_sort_oracle(rng):
    for _ in range(50):
        losses = rng.random(6).round(2).tolist()
        assert assign_rewards(losses).tolist() == oracles.ladder(losses)


def test_reward_errors():
    with pytest.raises(ValueError):
        assign_rewards([1.0])
    with pytest.raises(ValueError):
        assign_rewards([1.0, float("nan")])
    with pytest.raises(ValueError):
        assign_rewards([1.0, 2.0], "softmax")


# -- rank and multi-task losses --------------------------------------------------------


def test_rank_loss_examples():
    got = rank_loss(torch.tensor([0.8, 0.2], dtype=torch.float64), torch.tensor([1.0, 0.0])).item()
    assert got == pytest.approx(0.5 * -math.log(1 / (1 + math.exp(-0.6))), rel=1e-12)
    # -log(0.64566) / 2 = 0.218744
    assert round(got, 5) == 0.21874
    for k in (2, 3, 4, 6):
        r = torch.tensor([1 - j / (k - 1) for j in range(k)], dtype=torch.float64)
        s = torch.full((k,), 0.37, dtype=torch.float64)
        assert rank_loss(s, r).item() == pytest.approx(math.log(k) / 2, rel=1e-12)
    assert rank_loss(torch.rand(4), torch.zeros(4)).item() == 0.0
    with pytest.raises(ValueError):
        rank_loss(torch.rand(3), torch.zeros(4))


def test_rank_loss_matches_scalar_oracle(rng):
    for _ in range(100):
        k = int(rng.integers(2, 9))
        s, r = rng.random(k), rng.random(k)
        got = rank_loss(torch.tensor(s), torch.tensor(r)).item()
        assert got == pytest.approx(oracles.rank_loss(s.tolist(), r.tolist()), rel=1e-10)


def test_multi_task_examples():
    rec = torch.tensor([3.0, 5.0], dtype=torch.float64)
    s, r = torch.tensor([0.3, 0.9], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert multi_task_loss(rec, s, r, 0.0).item() == 4.0
    assert multi_task_loss(rec, s, r, 0.1).item() == pytest.approx(4.0 + 0.1 * rank_loss(s, r).item())
    assert 4.0 + 0.1 * 0.5 == pytest.approx(4.05)


# -- learning rate -------------------------------------------------------------------


def test_learning_rate_examples():
    assert learning_rate(400, 400, 2e-4) == 2e-4
    assert learning_rate(200, 400, 2e-4) == pytest.approx(1e-4)
    assert learning_rate(1600, 400, 2e-4) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        learning_rate(1, 0, 1e-3)
    with pytest.raises(ValueError):
        learning_rate(0, 10, 1e-3)


@given(st.integers(1, 2000), st.integers(1, 5000))
def test_learning_rate_shape(warmup, step):
    lr = learning_rate(step, warmup, 1.0)
    assert 0 < lr <= 1.0
    if step > warmup:
        assert learning_rate(step + 1, warmup, 1.0) < lr
    else:
        assert lr == pytest.approx(step / warmup)


# -- forward pass, gradients, steps ---------------------------------------------------


def frozen_loss(model, cfg, pairs, vocab, seed=0):
    videos = [v.features.astype(np.float64) for v, _ in pairs]
    ids = [vocab.encode(q.tokens) for _, q in pairs]
    imp = [q.importance for _, q in pairs]
    first = forward_losses(model, videos, ids, imp, cfg, 0.5, np.random.default_rng(seed))
    return lambda: forward_losses(model, videos, ids, imp, cfg, 0.5, None,
                                  first.selections, first.masks).loss.mean(), first


def test_pipeline_scalar_matches_composed_oracles():
    cfg, pairs, vocab = tiny_setup()
    state = init_state(cfg, vocab)
    model = state.model.double()
    loss, out = frozen_loss(model, cfg, pairs[:3], vocab)
    total = 0.0
    for b in range(3):
        rec = out.rec[b].tolist()
        rewards = oracles.ladder(rec)
        assert out.rewards[b].tolist() == rewards
        total += sum(rec) / len(rec) + cfg.beta * oracles.rank_loss(out.confidences[b].tolist(), rewards)
    assert loss().item() == pytest.approx(total / 3, rel=1e-10)


def test_rec_loss_in_pipeline_matches_energy_oracle():
    from scn.completion import reconstruct_energies
    cfg, pairs, vocab = tiny_setup()
    model = init_state(cfg, vocab).model.double()
    _, out = frozen_loss(model, cfg, pairs[:1], vocab)
    video = pairs[0][0].features.astype(np.float64)
    mq = out.masks[0]
    for k, prop in enumerate(out.selections[0].proposals):
        e = reconstruct_energies(model, torch.tensor(mq.tokens), torch.tensor(video[prop.start:prop.end]))
        expect = oracles.masked_nll([e[i].tolist() for i in mq.positions], mq.originals)
        assert out.rec[0, k].item() == pytest.approx(expect, rel=1e-10)


@pytest.mark.parametrize("share", [True, False])
def test_full_loss_gradients_match_finite_differences(share):
    cfg, pairs, vocab = tiny_setup(share=share, d_model=8)
    model = init_state(cfg, vocab).model.double()
    loss, _ = frozen_loss(model, cfg, pairs[:2], vocab)
    errors = oracles.gradient_check(dict(model.named_parameters()), loss, per_tensor=8)
    assert max(errors.values()) < 1e-4, max(errors.items(), key=lambda kv: kv[1])


def test_without_rank_term_the_score_head_gets_no_gradient():
    cfg, pairs, vocab = tiny_setup(beta=0.0)
    state = init_state(cfg, vocab)
    train_step(pairs[:3], state)
    for p in state.model.score_head.parameters():
        assert p.grad is not None and torch.all(p.grad == 0)
    assert state.model.vocab_head.weight.grad.abs().sum() > 0


def test_steps_are_deterministic_and_count_updates():
    cfg, pairs, vocab = tiny_setup()
    a = init_state(cfg, vocab)
    b = clone_state(a)
    ma, mb = train_step(pairs[:3], a), train_step(pairs[:3], b)
    assert ma == mb and a.n_update == b.n_update == 1
    for (name, pa), pb in zip(a.model.named_parameters(), b.model.parameters()):
        assert torch.equal(pa, pb), name
    train_step(pairs[3:], a)
    assert a.n_update == 2 and [h["step"] for h in a.history] == [1, 2]


def test_step_metrics():
    cfg, pairs, vocab = tiny_setup()
    state = init_state(cfg, vocab)
    m = train_step(pairs[:3], state)
    assert set(m) == {"step", "loss", "rec_loss", "rank_loss", "p", "random_picks", "lr"}
    assert m["p"] == 0.5 and m["lr"] == pytest.approx(cfg.lr_max / cfg.warmup)
    assert 0 <= m["random_picks"] <= 3 * cfg.top_k
    assert m["loss"] == pytest.approx(m["rec_loss"] + cfg.beta * m["rank_loss"], rel=1e-5)


def test_training_never_reads_ground_truth():
    cfg, pairs, vocab = tiny_setup()
    state = init_state(cfg, vocab)
    before = GT_GUARD.reads
    train_step(pairs, state)
    assert GT_GUARD.reads == before


def test_non_finite_loss_is_reported():
    cfg, pairs, vocab = tiny_setup()
    state = init_state(cfg, vocab)
    with torch.no_grad():
        state.model.vocab_head.bias[5] = float("nan")
    with pytest.raises(FloatingPointError, match="offending pairs"):
        train_step(pairs[:2], state)


def test_single_pair_overfits():
    cfg, pairs, vocab = tiny_setup(lr_max=3e-3, warmup=10)
    state = init_state(cfg, vocab)
    losses = [train_step(pairs[:1], state)["loss"] for _ in range(200)]
    assert np.mean(losses[-10:]) <= 0.5 * np.mean(losses[:10])


# -- training loop --------------------------------------------------------------------


def test_zero_epochs_saves_initial_model(tmp_path):
    cfg, pairs, vocab = tiny_setup(epochs=0)
    res = train(pairs, cfg, pairs[:2], run_dir=tmp_path)
    assert res.history == [] and res.validation == []
    model, meta = load_checkpoint(tmp_path / "checkpoint.scnc")
    init = init_state(cfg, res.vocab).model
    for (name, a), b in zip(init.state_dict().items(), model.state_dict().values()):
        assert torch.equal(a, b), name
    assert meta["vocab"] == res.vocab.itos
    with open(tmp_path / "metrics.csv") as fh:
        assert next(csv.reader(fh))[:8] == ["step", "epoch", "loss", "rec_loss", "rank_loss", "p",
                                            "random_picks", "lr"]


def test_training_is_reproducible(tmp_path):
    cfg, pairs, _ = tiny_setup()
    a = train(pairs[:4], cfg, pairs[4:], run_dir=tmp_path / "a")
    b = train(pairs[:4], cfg, pairs[4:], run_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/checkpoint.scnc").read_bytes() == (tmp_path / "b/checkpoint.scnc").read_bytes()
    assert a.gt_reads == 0 and len(a.validation) == cfg.epochs
    rows = list(csv.DictReader(open(tmp_path / "a/metrics.csv")))
    val = [r for r in rows if r["R@1,IoU=0.5"]]
    assert len(val) == 2 and all(r["loss"] == "" for r in val)
