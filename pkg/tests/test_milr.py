import numpy as np
import pytest

from milr import tensor as T
from milr.checkpoint import digest, save_encoder
from milr.data import sample_episode
from milr.errors import ConfigError, ContractError, DimensionError
from milr.estimators import infonce_lower_bound, score_matrix, vib_upper_bound
from milr.milr import (
    LOG_COLUMNS,
    FeatureCache,
    MaskNetwork,
    MilrConfig,
    MilrState,
    Whitener,
    apply_mask,
    contrast_ids,
    decision_information_grid,
    decision_information_map,
    milr_objective,
    redundancy_map,
    stage1_collect,
    total_information_grid,
    total_information_map,
    train_milr,
)
from milr.nn import EncoderConfig, build_encoder
from milr.protonet import episode_loss
from milr.tensor import Tensor
from milr.viz import InfoMap


# -- stage 1 ---------------------------------------------------------------------

def test_cache_equals_fresh_forward(small_encoder, small_dataset, small_cache):
    out = small_encoder(Tensor(small_dataset.images[:7]))
    loc, rep = small_cache.get(range(7))
    assert loc.tobytes() == out.local_features.data.tobytes()
    assert rep.tobytes() == out.representation.data.tobytes()


def test_cache_twice_identical(small_encoder, small_dataset, small_cache):
    again = stage1_collect(small_encoder, small_dataset.images, batch_size=17)
    assert again.locals.tobytes() == small_cache.locals.tobytes()
    assert again.reprs.tobytes() == small_cache.reprs.tobytes()


def test_cache_size(small_cache, small_dataset):
    c = EncoderConfig()
    K = len(small_dataset)
    assert small_cache.n_reals == K * (c.tap_channels * c.n_local + c.repr_dim)


def test_cache_requires_frozen_encoder(small_dataset):
    with pytest.raises(ContractError):
        stage1_collect(build_encoder(EncoderConfig()), small_dataset.images[:2])


def test_cache_missing_id(small_cache):
    with pytest.raises(ContractError):
        small_cache.get([10_000])


# -- mask --------------------------------------------------------------------------

def test_mask_ones_is_identity(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    alpha = MaskNetwork(4, mode="ones")(Tensor(x))
    assert apply_mask(Tensor(x), alpha).data.tobytes() == x.tobytes()


def test_mask_zeros_kills_features(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    assert np.array_equal(apply_mask(Tensor(x), MaskNetwork(4, mode="zeros")(Tensor(x))).data, np.zeros_like(x))


def test_apply_mask_elementwise(rng):
    x, a = rng.standard_normal((2, 3, 2, 2)), rng.uniform(0, 1, (2, 3, 2, 2))
    assert np.array_equal(apply_mask(Tensor(x), Tensor(a)).data, x * a)
    with pytest.raises(DimensionError):
        apply_mask(Tensor(x), Tensor(a[:, :2]))


def test_learned_mask_in_open_interval(rng):
    alpha = MaskNetwork(4, seed=3)(Tensor(5 * rng.standard_normal((3, 4, 5, 5)))).data
    assert np.all((alpha > 0) & (alpha < 1))


def test_unknown_mask_mode():
    with pytest.raises(ConfigError):
        MaskNetwork(4, mode="half")


# -- objective -----------------------------------------------------------------------

def _state(cache, **kw):
    cfg = MilrConfig(n_query=3, **kw)
    state = MilrState.create(16, 64, Whitener.fit(cache.reprs, cfg.bottleneck_dim), cfg, seed=0)
    state.critic.fit_normalization(cache.locals, cache.reprs)
    return state


@pytest.fixture
def episode(small_dataset):
    return sample_episode(small_dataset, 5, 1, 3, np.random.default_rng(9))


def test_zero_weights_reduce_to_task_loss(small_encoder, small_cache, episode):
    terms = milr_objective(episode, small_encoder, _state(small_cache, alpha_weight=0, beta_weight=0), small_cache)
    assert terms.total.item() == -terms.task_loss.item()


def test_identity_mask_task_loss_equals_frozen_loss(small_encoder, small_cache, episode):
    terms = milr_objective(episode, small_encoder, _state(small_cache, beta_weight=0, mask_mode="ones"), small_cache)
    assert terms.task_loss.item() == episode_loss(episode, small_encoder).loss.item()
    assert terms.mean_alpha == 1.0


def test_total_is_component_sum(small_encoder, small_cache, episode):
    state = _state(small_cache, alpha_weight=0.7, beta_weight=0.3)
    t = milr_objective(episode, small_encoder, state, small_cache)
    assert t.total.item() == pytest.approx(-t.task_loss.item() + 0.7 * t.nce.item() - 0.3 * t.kl.item(), abs=1e-12)


def test_objective_needs_cache_and_frozen_encoder(small_encoder, small_cache, small_dataset, episode):
    partial = FeatureCache(small_cache.ids[:5], small_cache.locals[:5], small_cache.reprs[:5])
    with pytest.raises(ContractError):
        milr_objective(episode, small_encoder, _state(small_cache), partial)
    with pytest.raises(ContractError):
        milr_objective(episode, build_encoder(EncoderConfig()), _state(small_cache), small_cache)


def test_gradient_routing(small_encoder, small_cache, episode):
    """KL reaches only the mask; the head learns only from the likelihood fit."""
    state = _state(small_cache)
    t = milr_objective(episode, small_encoder, state, small_cache)
    t.kl.backward()
    assert all(p.grad is None for p in state.head.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in state.mask.parameters())
    for p in state.parameters():
        p.grad = None
    t = milr_objective(episode, small_encoder, state, small_cache)
    t.fit_nll.backward()
    assert all(p.grad is None for p in state.mask.parameters())
    assert all(p.grad is None for p in small_encoder.parameters())


# -- training -------------------------------------------------------------------------

def test_training_leaves_backbone_untouched(tmp_path, small_dataset, small_encoder, small_cache):
    before = save_encoder(small_encoder, tmp_path / "before.ckpt")
    state, log = train_milr(small_dataset, small_encoder, MilrConfig(episodes=5, n_query=3), seed=1,
                            cache=small_cache, log_path=tmp_path / "log.csv", checkpoint_path=tmp_path / "m.ckpt")
    after = save_encoder(small_encoder, tmp_path / "after.ckpt")
    assert digest(before) == digest(after)
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(LOG_COLUMNS)
    assert len(log) == 5 and state.trained


def test_training_is_deterministic(small_dataset, small_encoder, small_cache):
    cfg = MilrConfig(episodes=4, n_query=3)
    _, a = train_milr(small_dataset, small_encoder, cfg, seed=2, cache=small_cache)
    _, b = train_milr(small_dataset, small_encoder, cfg, seed=2, cache=small_cache)
    assert a == b


def test_state_checkpoint_roundtrip(tmp_path, small_state, small_cache):
    back = MilrState.load(small_state.save(tmp_path / "m.ckpt"))
    assert back.trained
    for (n1, p1), (n2, p2) in zip(small_state.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    a = total_information_map(small_state, small_cache, 3, contrast_size=10)
    b = total_information_map(back, small_cache, 3, contrast_size=10)
    assert a.values.tobytes() == b.values.tobytes()


def test_training_requires_frozen_encoder(small_dataset):
    with pytest.raises(ContractError):
        train_milr(small_dataset, build_encoder(EncoderConfig()), MilrConfig(episodes=1))


def test_large_beta_lowers_kl(small_dataset, small_encoder, small_cache):
    """Paired runs. After the head has fitted (first 30 steps), the KL penalty drives the
    per-location KL down, while without it the KL holds its level."""
    runs = {}
    for beta in (0.0, 10.0):
        _, log = train_milr(small_dataset, small_encoder, MilrConfig(episodes=150, beta_weight=beta, n_query=3),
                            seed=0, cache=small_cache)
        kl = np.array([row[3] for row in log])
        runs[beta] = (kl[30:60].mean(), kl[-30:].mean())
    assert runs[10.0][1] < 0.8 * runs[10.0][0]
    assert runs[0.0][1] > 0.8 * runs[0.0][0]
    assert runs[10.0][1] < runs[0.0][1]


# -- maps ------------------------------------------------------------------------------

def test_untrained_state_needs_flag(small_cache):
    state = _state(small_cache)
    with pytest.raises(ContractError):
        total_information_map(state, small_cache, 0, contrast_size=5)
    with pytest.raises(ContractError):
        decision_information_map(state, small_cache, 0)
    m = total_information_map(state, small_cache, 0, contrast_size=5, allow_untrained=True)
    assert m.shape == (8, 8)


def test_zero_critic_zero_total_map(small_state, small_cache):
    import copy

    state = copy.deepcopy(small_state)
    state.critic.zero_()
    m = total_information_map(state, small_cache, 4, contrast_size=6)
    assert m.shape == (8, 8) and np.array_equal(m.values, np.zeros((8, 8)))


def test_total_grid_aggregates_to_bound(small_state, small_cache):
    ids = contrast_ids(small_cache, 5, 12, seed=0, batch=0)
    loc, rep = small_cache.get(ids)
    grid = total_information_grid(small_state, loc, rep)
    with T.no_grad():
        bound = infonce_lower_bound(score_matrix(small_state.critic, Tensor(loc), Tensor(rep))).item()
    assert abs(grid.mean() - bound) < 1e-9
    single = total_information_map(small_state, small_cache, 5, contrast_batches=1, contrast_size=12)
    assert single.values.tobytes() == grid[0].tobytes()


def test_contrast_ids_reproducible_and_exclusive(small_cache):
    a = contrast_ids(small_cache, 7, 10, seed=3, batch=1)
    assert a[0] == 7 and 7 not in a[1:] and len(set(a)) == 10
    assert np.array_equal(a, contrast_ids(small_cache, 7, 10, seed=3, batch=1))
    with pytest.raises(ContractError):
        contrast_ids(small_cache, 7, len(small_cache) + 1, seed=0, batch=0)


def test_standard_normal_head_zero_decision_map(small_state, small_cache):
    import copy

    state = copy.deepcopy(small_state)
    state.head.set_standard_normal()
    assert np.array_equal(decision_information_map(state, small_cache, 2).values, np.zeros((8, 8)))


def test_decision_map_aggregation(small_state, small_cache):
    m = decision_information_map(small_state, small_cache, 6)
    assert np.all(m.values >= 0)
    loc, _ = small_cache.get([6])
    with T.no_grad():
        alpha = small_state.mask(Tensor(loc))
        vib = vib_upper_bound(small_state.head, apply_mask(Tensor(loc), alpha)).mean.item()
    assert abs(m.values.mean() - vib) < 1e-9
    assert abs(m.values.sum() - 64 * vib) < 1e-9 * 64
    assert np.array_equal(decision_information_grid(small_state, loc)[0], m.values)


def test_redundancy_examples(rng):
    t = InfoMap(rng.standard_normal((4, 4)), "total", 1)
    d = InfoMap(np.abs(rng.standard_normal((4, 4))), "decision", 1)
    assert np.array_equal(redundancy_map(t, InfoMap(t.values, "decision", 1)).values, np.zeros((4, 4)))
    assert np.array_equal(redundancy_map(t, InfoMap(np.zeros((4, 4)), "decision", 1)).values, t.values)
    r = redundancy_map(t, d)
    assert r.kind == "redundant" and np.array_equal(r.values, t.values - d.values)
    with pytest.raises(DimensionError):
        redundancy_map(t, InfoMap(np.zeros((2, 2)), "decision", 1))


@pytest.mark.xfail(strict=True, reason="InfoNCE saturates near ln(n_way) per location while the Gaussian KL "
                                       "bound does not; see the decisions ledger")
def test_pinned_identity_mask_total_matches_decision(small_dataset, small_encoder, small_cache):
    state, _ = train_milr(small_dataset, small_encoder, MilrConfig(episodes=300, mask_mode="ones", n_query=3),
                          seed=0, cache=small_cache)
    diffs = []
    for sid in range(0, len(small_dataset), 6):
        t = total_information_map(state, small_cache, sid, contrast_size=20)
        d = decision_information_map(state, small_cache, sid)
        diffs.append(np.abs(t.values - d.values).mean())
    assert np.mean(diffs) < 0.1
