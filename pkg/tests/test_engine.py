import numpy as np
import numpy.testing as npt
import pytest

from fedimpres import engine, nn
from fedimpres.data import ToySpec, dirichlet_partition, make_toy_task, seed_pool
from fedimpres.engine import (ClientState, RoundConfig, aggregate,
                              aggregate_models, clients_from_shards,
                              fedprox_local_train, local_train, run_experiment,
                              run_round, save_weights, load_model, load_weights,
                              stream_rng)
from fedimpres.errors import ConfigError, ProtocolError
from fedimpres.impression import SynthesisConfig


def fed_setup(n_classes=2, per_class=30, n_clients=2, alpha=0.5, seed=0):
    ds = make_toy_task(ToySpec(n_classes, per_class, shape=(1, 6, 6),
                               sigma=0.15, seed=seed))
    shards = dirichlet_partition(ds, n_clients, alpha, seed + 1)
    clients = clients_from_shards(shards)
    layers = [nn.Flatten(), nn.Dense(36, 12), nn.Relu(), nn.Dense(12, n_classes)]
    model = nn.init_model(layers, seed + 2)
    pool = seed_pool("random", (1, 6, 6), 8, seed=seed + 3)
    return model, ds, clients, pool


def models_equal(a, b):
    return all(x.tobytes() == y.tobytes()
               for x, y in zip(nn.model_arrays(a), nn.model_arrays(b)))


# ---------------------------------------------------------------------------
# aggregation


def one_param_model(value):
    return nn.Model((nn.Dense(1, 1),), (), np.array([[float(value)]]), np.array([0.0]))


def test_aggregate_identical_updates():
    m = one_param_model(3.0)
    out = aggregate_models([(0, m, 5), (1, m, 7)], m.layers)
    assert models_equal(out, m)


def test_aggregate_uniform_mean():
    out = aggregate_models([(0, one_param_model(0.0), 1),
                            (1, one_param_model(4.0), 1)],
                           one_param_model(0).layers)
    assert out.clf_weight[0, 0] == 2.0


def test_aggregate_weighted_mean():
    out = aggregate_models([(0, one_param_model(0.0), 1),
                            (1, one_param_model(4.0), 3)],
                           one_param_model(0).layers, mode="weighted")
    assert out.clf_weight[0, 0] == pytest.approx(3.0, abs=1e-15)


def test_aggregate_permutation_invariant_bitwise():
    ms = [one_param_model(v) for v in (0.1, 0.7, 1.3)]
    fwd = aggregate([(i, nn.model_arrays(m), 1) for i, m in enumerate(ms)])
    rev = aggregate([(i, nn.model_arrays(m), 1)
                     for i, m in reversed(list(enumerate(ms)))])
    for a, b in zip(fwd, rev):
        assert a.tobytes() == b.tobytes()


def test_aggregate_scalar_linearity():
    ms = [one_param_model(v) for v in (0.25, 1.5)]
    base = aggregate([(i, nn.model_arrays(m), 1) for i, m in enumerate(ms)])
    doubled = aggregate([(i, [2.0 * a for a in nn.model_arrays(m)], 1)
                         for i, m in enumerate(ms)])
    for a, b in zip(base, doubled):
        npt.assert_array_equal(2.0 * a, b)


def test_aggregate_convex_hull():
    rng = np.random.default_rng(0)
    model, _, _, _ = fed_setup()
    ups = []
    for i in range(3):
        arrays = [a + rng.normal(0, 0.1, a.shape) for a in nn.model_arrays(model)]
        ups.append((i, arrays, 1))
    for mode in ("uniform", "weighted"):
        out = aggregate(ups, mode)
        for t, agg in enumerate(out):
            lo = np.min([u[1][t] for u in ups], axis=0)
            hi = np.max([u[1][t] for u in ups], axis=0)
            assert np.all(agg >= lo - 1e-12) and np.all(agg <= hi + 1e-12)


def test_aggregate_shape_mismatch_names_client():
    m = one_param_model(1.0)
    bad = [np.zeros((2, 2)), np.zeros(1)]
    with pytest.raises(ProtocolError, match="client 1"):
        aggregate([(0, nn.model_arrays(m), 1), (1, bad, 1)])


def test_aggregate_empty():
    with pytest.raises(ProtocolError):
        aggregate([])


# ---------------------------------------------------------------------------
# local training


def test_local_train_zero_epochs_returns_global():
    model, ds, clients, _ = fed_setup()
    cfg = RoundConfig(local_epochs=0, total_rounds=1)
    out, n, _ = local_train(ds, clients[0], model, cfg, stream_rng(0, 1))
    assert models_equal(out, model)
    assert n == len(clients[0].shard)


def test_local_train_beta_zero_ignores_impression_bitwise():
    from fedimpres.impression import ImpressionBatch
    model, ds, clients, pool = fed_setup()
    imp = ImpressionBatch(pool.images, np.zeros(8, dtype=np.int64),
                          np.zeros((2, 13)), 0.2)
    cfg0 = RoundConfig(local_epochs=2, beta=0.0, total_rounds=1)
    a, _, _ = local_train(ds, clients[0], model, cfg0, stream_rng(0, 5), impression=imp)
    b, _, _ = local_train(ds, clients[0], model, cfg0, stream_rng(0, 5), impression=None)
    assert models_equal(a, b)


def test_local_train_beta_one_first_step_gradient_sums():
    # one local sample + one impression sample: the first step must apply
    # exactly the sum of the two per-sample gradients
    from fedimpres.impression import ImpressionBatch
    model, ds, _, pool = fed_setup()
    client = ClientState(0, np.array([0]))
    imp = ImpressionBatch(pool.images[:1], np.array([1]), np.zeros((2, 13)), 0.2)
    cfg = RoundConfig(local_epochs=1, batch_size=1, beta=1.0, local_lr=0.05,
                      total_rounds=1)
    out, _, _ = local_train(ds, client, model, cfg, stream_rng(0, 9), impression=imp)
    g_local, _ = nn.backward(model, ds.images[:1], ds.labels[:1])
    g_imp, _ = nn.backward(model, imp.images, imp.pseudo_labels)
    expected = nn.sgd_step(model, nn.add_scaled(g_local, g_imp), 0.05)
    assert models_equal(out, expected)


def test_fedprox_mu_zero_is_plain_bitwise():
    model, ds, clients, _ = fed_setup()
    cfg = RoundConfig(algorithm="fedprox", local_epochs=2, mu=0.0, total_rounds=1)
    a, _, _ = fedprox_local_train(ds, clients[0], model, cfg, stream_rng(0, 2))
    b, _, _ = local_train(ds, clients[0], model, cfg, stream_rng(0, 2))
    assert models_equal(a, b)


def test_fedprox_proximal_contribution_closed_form():
    model, _, _, _ = fed_setup()
    drifted = nn.model_from_arrays(model.layers,
                                   [a + 0.3 for a in nn.model_arrays(model)])
    g = nn.prox_grads(drifted, model)
    for got, a, b in zip([*(x for p in g.extractor for x in p),
                          g.clf_weight, g.clf_bias],
                         nn.model_arrays(drifted), nn.model_arrays(model)):
        npt.assert_allclose(got, a - b, atol=1e-15)


def test_fedprox_large_mu_stays_closer():
    model, ds, clients, _ = fed_setup()
    base = RoundConfig(local_epochs=1, total_rounds=1)
    prox = RoundConfig(algorithm="fedprox", local_epochs=1, mu=1e6,
                       local_lr=1e-7, total_rounds=1)
    # same lr so the data-gradient displacement is comparable
    base_small = RoundConfig(local_epochs=1, local_lr=1e-7, total_rounds=1)
    plain, _, _ = local_train(ds, clients[0], model, base_small, stream_rng(0, 3))
    proxed, _, _ = fedprox_local_train(ds, clients[0], model, prox, stream_rng(0, 3))

    def dist(m):
        return np.sqrt(sum(((a - b) ** 2).sum() for a, b in
                           zip(nn.model_arrays(m), nn.model_arrays(model))))
    assert dist(proxed) < dist(plain)


# ---------------------------------------------------------------------------
# rounds


def test_round_single_client_aggregates_to_update():
    model, ds, _, _ = fed_setup()
    client = ClientState(0, np.arange(len(ds)))
    cfg = RoundConfig(local_epochs=1, total_rounds=1)
    new_global, _ = run_round(model, ds, [client], 0, cfg, master_seed=4)
    rng = stream_rng(4, engine.STREAM_CLIENT, 0, 0)
    direct, _, _ = local_train(ds, client, model, cfg, rng)
    assert models_equal(new_global, direct)


def test_warmup_fedimpres_equals_fedavg_bitwise():
    model, ds, clients, pool = fed_setup()
    fi = RoundConfig(algorithm="fedimpres", local_epochs=2, warmup_rounds=1,
                     total_rounds=2)
    fa = RoundConfig(algorithm="fedavg", local_epochs=2, total_rounds=2)
    a, _ = run_round(model, ds, clients, 0, fi, master_seed=7,
                     synth_cfg=SynthesisConfig(batch_size=8), pool=pool)
    b, _ = run_round(model, ds, clients, 0, fa, master_seed=7)
    assert models_equal(a, b)


def test_reduction_chain_bitwise():
    model, ds, clients, pool = fed_setup()
    synth = SynthesisConfig(admm_epochs=2, pixel_steps=4, batch_size=8)
    common = dict(local_epochs=2, total_rounds=3)
    cfgs = [RoundConfig(algorithm="fedimpres", beta=0.0, warmup_rounds=1, **common),
            RoundConfig(algorithm="fedprox", mu=0.0, **common),
            RoundConfig(algorithm="fedavg", **common)]
    finals = []
    for cfg in cfgs:
        _, final = run_experiment(model, ds, clients, cfg, master_seed=11,
                                  synth_cfg=synth, pool=pool)
        finals.append(final)
    assert models_equal(finals[0], finals[1])
    assert models_equal(finals[1], finals[2])


def test_single_round_experiment_matches_run_round():
    model, ds, clients, _ = fed_setup()
    cfg = RoundConfig(local_epochs=1, total_rounds=1)
    recs, final = run_experiment(model, ds, clients, cfg, master_seed=5)
    direct, rec = run_round(model, ds, clients, 0, cfg, master_seed=5)
    assert len(recs) == 1
    assert models_equal(final, direct)
    assert recs[0].client_acc == rec.client_acc


def test_epoch_budget_parity():
    # (rounds=8, E=5) and (rounds=4, E=10) consume the same local-epoch budget
    a = RoundConfig(total_rounds=8, local_epochs=5)
    b = RoundConfig(total_rounds=4, local_epochs=10)
    assert a.total_rounds * a.local_epochs == b.total_rounds * b.local_epochs == 40


def test_experiment_reproducible_bitwise():
    model, ds, clients, pool = fed_setup(seed=9)
    cfg = RoundConfig(algorithm="fedimpres", local_epochs=2, warmup_rounds=1,
                      total_rounds=3, beta=1.0)
    synth = SynthesisConfig(admm_epochs=2, pixel_steps=4, batch_size=8)
    runs = [run_experiment(model, ds, clients, cfg, master_seed=21,
                           synth_cfg=synth, pool=pool, test_dataset=ds)
            for _ in range(2)]
    assert models_equal(runs[0][1], runs[1][1])
    assert [r.global_acc for r in runs[0][0]] == [r.global_acc for r in runs[1][0]]


def test_parallel_clients_match_serial(monkeypatch):
    model, ds, clients, _ = fed_setup(n_clients=3, alpha=1.0)
    cfg = RoundConfig(local_epochs=2, total_rounds=1)
    serial, _ = run_round(model, ds, clients, 0, cfg, master_seed=2)
    monkeypatch.setenv("FEDIMPRES_THREADS", "3")
    parallel, _ = run_round(model, ds, clients, 0, cfg, master_seed=2)
    assert models_equal(serial, parallel)


def test_round_config_validation():
    with pytest.raises(ConfigError):
        RoundConfig(algorithm="sgd")
    with pytest.raises(ConfigError):
        RoundConfig(warmup_rounds=5, total_rounds=5)
    with pytest.raises(ConfigError):
        RoundConfig(beta=-0.5)
    with pytest.raises(ConfigError):
        ClientState(0, np.array([], dtype=np.int64))


def test_fedimpres_round_requires_pool():
    model, ds, clients, _ = fed_setup()
    cfg = RoundConfig(algorithm="fedimpres", warmup_rounds=0, total_rounds=1)
    with pytest.raises(ConfigError):
        run_round(model, ds, clients, 0, cfg)


# ---------------------------------------------------------------------------
# weight persistence


def test_weight_dump_roundtrip(tmp_path):
    model, _, _, _ = fed_setup(seed=13)
    path = tmp_path / "w.bin"
    save_weights(model, path)
    back = load_model(path, model.layers)
    assert models_equal(model, back)


def test_weight_dump_layout(tmp_path):
    import struct
    m = one_param_model(2.5)
    path = tmp_path / "w.bin"
    save_weights(m, path)
    raw = path.read_bytes()
    count, = struct.unpack_from("<I", raw, 0)
    assert count == 2  # head weight + head bias
    rank, d0, d1 = struct.unpack_from("<III", raw, 4)
    assert (rank, d0, d1) == (2, 1, 1)
    value, = struct.unpack_from("<d", raw, 16)
    assert value == 2.5
