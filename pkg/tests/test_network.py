import struct

import numpy as np
import pytest

from ctrgcn import graph_conv as gc
from ctrgcn import network as nw
from ctrgcn import tensor as tn
from ctrgcn.checks import TINY_CONFIG
from ctrgcn.errors import ConfigurationError, DimensionError, FormatError
from ctrgcn.skeleton import build_graph
from ctrgcn.tensor import Tensor

SMALL = nw.ModelConfig(graph="toy5", num_classes=4, channels=(8, 8, 16), strides=(1, 2, 1), r=4,
                       num_persons=2, frames=8, alpha_init=0.3)


def batch(rng, b=2, m=2, t=8, n=5, c=3):
    return rng.normal(size=(b, m, t, n, c))


def logits(model, x):
    with tn.no_grad():
        return nw.model_forward(model, x).data


def np_bn(x):
    axes = tuple(range(x.ndim - 1))
    mu = x.mean(axis=axes)
    var = ((x - mu) ** 2).mean(axis=axes)
    return (x - mu) / np.sqrt(var + 1e-5)


# -- construction and shapes --------------------------------------------------------

@pytest.fixture(scope="module")
def ntu_model():
    return nw.build_model(nw.ntu_config(60)).eval()


def test_shape_ledger(ntu_model):
    x = np.random.default_rng(0).normal(size=(1, 64, 25, 3))
    frames = []
    for h in nw.block_inputs(ntu_model, x)[1:]:
        frames.append((h.shape[1], h.shape[3]))
    with tn.no_grad():
        last = ntu_model.blocks[-1](nw.block_inputs(ntu_model, x)[-1])
    frames.append((last.shape[1], last.shape[3]))
    assert frames == [(64, 64)] * 4 + [(32, 128)] * 3 + [(16, 256)] * 3


def test_ntu_and_ucla_heads(ntu_model):
    assert len(ntu_model.blocks) == 10
    assert ntu_model.fc.weight.shape == (256, 60)
    ucla = nw.build_model(nw.nwucla_config())
    assert ucla.fc.weight.shape == (256, 10) and ucla.num_joints == 20


def test_ntu_forward_gives_sixty_logits(ntu_model):
    x = np.random.default_rng(1).normal(size=(1, 2, 64, 25, 3))
    assert logits(ntu_model, x).shape == (1, 60)


def test_shared_topologies_start_at_partitions(ntu_model):
    from ctrgcn.skeleton import adjacency_set
    parts = adjacency_set(build_graph("ntu25")).stack()
    for block in ntu_model.blocks:
        for k, layer in enumerate(block.spatial.gcs):
            assert np.array_equal(layer.A.data, parts[k])


def test_same_seed_same_parameters():
    a, b = nw.build_model(SMALL, seed=3), nw.build_model(SMALL, seed=3)
    assert all(np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(a.named_tensors(), b.named_tensors()))
    c = nw.build_model(SMALL, seed=4)
    assert not np.array_equal(a.fc.weight.data, c.fc.weight.data)


def test_invalid_channel_plans():
    with pytest.raises(ConfigurationError):
        nw.build_model(SMALL.replace(channels=(8, 10, 16)))
    with pytest.raises(ConfigurationError):
        nw.build_model(SMALL.replace(strides=(1, 2)))
    with pytest.raises(ConfigurationError):
        nw.build_model(SMALL.replace(gc="gcn"))


def test_forward_shape_mismatch():
    model = nw.build_model(SMALL)
    with pytest.raises(DimensionError):
        nw.model_forward(model, np.zeros((1, 2, 8, 6, 3)))
    with pytest.raises(DimensionError):
        nw.model_forward(model, np.zeros((2, 8, 5, 3)))


# -- forward semantics ----------------------------------------------------------

def test_duplicated_sample_duplicates_logits():
    model = nw.build_model(SMALL).eval()
    x = batch(np.random.default_rng(2), b=1)
    out = logits(model, np.concatenate([x, x]))
    assert np.array_equal(out[0], out[1])


def test_zero_person_decomposition():
    model = nw.build_model(SMALL).eval()
    rng = np.random.default_rng(3)
    person = rng.normal(size=(1, 8, 5, 3))
    x = np.concatenate([person, np.zeros_like(person)])[None]
    with tn.no_grad():
        f_person = model.features(Tensor(person)).data.mean(axis=(1, 2))
        f_zero = model.features(Tensor(np.zeros_like(person))).data.mean(axis=(1, 2))
    ref = ((f_person + f_zero) / 2) @ model.fc.weight.data + model.fc.bias.data
    assert np.max(np.abs(logits(model, x) - ref)) < 1e-12


def test_permutation_consistency():
    rng = np.random.default_rng(4)
    graph = build_graph("toy5")
    perm = rng.permutation(5)
    a = nw.build_model(SMALL, seed=5, graph=graph).eval()
    b = nw.build_model(SMALL, seed=5, graph=graph.permuted(perm)).eval()
    # joint j of the original graph becomes joint perm[j]
    x = batch(rng)
    xp = np.empty_like(x)
    xp[:, :, :, perm] = x
    assert np.max(np.abs(logits(a, x) - logits(b, xp))) < 1e-10


# -- spatial and temporal modules -------------------------------------------------

def spatial_block(rng):
    return nw.build_model(SMALL, seed=int(rng.integers(100))).blocks[1].spatial


def test_spatial_sum_matches_three_way_oracle():
    rng = np.random.default_rng(6)
    sp = spatial_block(rng)
    x = Tensor(rng.normal(size=(2, 8, 5, 8)))
    ref = sum(gc.ctr_gc_forward(layer, x).data for layer in sp.gcs)
    assert np.array_equal(sp.pre_activation(x).data, ref)


def zero_transform(layer):
    layer.transform.weight.data[...] = 0.0
    layer.transform.bias.data[...] = 0.0


def test_spatial_zeroed_layers():
    rng = np.random.default_rng(7)
    sp = spatial_block(rng)
    x = Tensor(rng.normal(size=(2, 8, 5, 8)))
    zero_transform(sp.gcs[1])
    zero_transform(sp.gcs[2])
    assert np.array_equal(sp.pre_activation(x).data, gc.ctr_gc_forward(sp.gcs[0], x).data)
    zero_transform(sp.gcs[0])
    assert not np.any(sp.pre_activation(x).data)


def test_spatial_channel_mismatch():
    sp = spatial_block(np.random.default_rng(8))
    with pytest.raises(DimensionError):
        sp(Tensor(np.zeros((1, 8, 5, 4))))


def conv_loop(x, w, kernel, dilation, stride):
    """Sliding-window oracle; ``w`` is ``[kernel * C, C']`` with taps stacked on rows."""
    b, t, n, c = x.shape
    p = (kernel - 1) * dilation // 2
    t_out = (t - 1) // stride + 1
    out = np.zeros((b, t_out, n, w.shape[1]))
    for s in range(t_out):
        centre = s * stride
        for q in range(kernel):
            src = centre + (q * dilation - p)
            if 0 <= src < t:
                out[:, s] += x[:, src] @ w[q * c:(q + 1) * c]
    return out


def pool_loop(x, kernel, stride):
    t = x.shape[1]
    p = (kernel - 1) // 2
    t_out = (t - 1) // stride + 1
    out = np.empty((x.shape[0], t_out) + x.shape[2:])
    for s in range(t_out):
        lo, hi = max(0, s * stride - p), min(t, s * stride + p + 1)
        out[:, s] = x[:, lo:hi].max(axis=1)
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_temporal_module_loop_oracle(stride):
    rng = np.random.default_rng(9 + stride)
    tm = nw.TemporalModule(8, 8, stride, rng)
    x = rng.normal(size=(2, 9, 5, 8))
    out = tm(Tensor(x)).data
    refs = []
    for br in tm.dilated:
        h = np.maximum(np_bn(x @ br.reduce.weight.data), 0)
        refs.append(np_bn(conv_loop(h, br.tconv.conv.weight.data, br.tconv.kernel, br.tconv.dilation, stride)))
    h = np.maximum(np_bn(x @ tm.pool_reduce.weight.data), 0)
    refs.append(np_bn(pool_loop(h, 3, stride)))
    refs.append(np_bn(x[:, ::stride] @ tm.plain.conv.weight.data))
    assert out.shape == (2, (9 - 1) // stride + 1, 5, 8)
    assert np.max(np.abs(out - np.concatenate(refs, axis=-1))) < 1e-12


def test_temporal_module_constant_input():
    rng = np.random.default_rng(11)
    tm = nw.TemporalModule(8, 8, 1, rng)
    x = np.broadcast_to(rng.normal(size=(2, 1, 5, 8)), (2, 12, 5, 8)).copy()
    out = tm(Tensor(x)).data
    reach = (5 - 1) * 2 // 2
    interior = out[:, reach:12 - reach]
    assert np.max(np.abs(interior - interior[:, :1])) < 1e-12
    pooled = out[:, :, :, 4:6]            # max-pool and plain branches
    assert np.max(np.abs(pooled - pooled[:, :1])) < 1e-12


def test_stride_two_halves_frames():
    tm = nw.TemporalModule(8, 8, 2, np.random.default_rng(12))
    assert tm(Tensor(np.zeros((1, 64, 5, 8)))).shape == (1, 32, 5, 8)


def test_temporal_width_must_divide():
    with pytest.raises(ConfigurationError):
        nw.TemporalModule(8, 10, 1, np.random.default_rng(0))


def test_pool_mode_is_parameter_free():
    tm = nw.TemporalModule(8, 8, 2, np.random.default_rng(0), mode="pool")
    x = np.random.default_rng(1).normal(size=(1, 6, 5, 8))
    out = tm(Tensor(x)).data
    assert not list(tm.named_parameters()) and out.shape == (1, 3, 5, 8)
    assert np.allclose(out, x.mean(axis=1, keepdims=True), rtol=0, atol=1e-15)


def test_residual_identity_block():
    rng = np.random.default_rng(13)
    block = nw.BasicBlock(SMALL, 8, 8, 1, np.stack([np.eye(5)] * 3), rng)
    for path, t in block.named_parameters():
        if path.endswith("weight") or path.endswith("bias"):
            t.data[...] = 0.0
    x = rng.normal(size=(2, 8, 5, 8))
    assert block.residual is None
    assert np.array_equal(block(Tensor(x)).data, np.maximum(x, 0))


# -- counting ------------------------------------------------------------------

FROZEN_PARAMS = {"ctrgc": 1457676, "stgc": 1204728, "agc": 1520142, "dcgc": 1504728, "dcgc_star": 3370353}


@pytest.mark.parametrize("variant", sorted(FROZEN_PARAMS))
def test_param_counts_frozen_and_brute_force(variant):
    model = nw.build_model(nw.ntu_config(120, gc=variant))
    report = nw.count_params(model)
    brute = sum(int(np.prod(t.data.shape)) for _, t in model.named_tensors() if t.requires_grad)
    assert report.total == brute == FROZEN_PARAMS[variant]
    assert sum(report.per_block.values()) == sum(report.per_role.values()) == report.total


def test_param_roles_cover_alpha_and_topologies(ntu_model):
    roles = nw.count_params(ntu_model).per_role
    assert roles["alpha"] == 30 and roles["topologies"] == 30 * 25 * 25


def test_matmul_flops_convention():
    assert nw.matmul_flops(3, 4, 5) == 120 and nw.matmul_flops(3, 4, 5, mac_cost=1) == 60


def test_frozen_flop_values():
    ctr = nw.count_flops(nw.build_model(nw.ntu_config(120)))
    st = nw.count_flops(nw.build_model(nw.ntu_config(120, gc="stgc")))
    assert ctr.per_sample.macs == 1937710720 and st.per_sample.macs == 1658705920
    assert abs(ctr.total(1) / 1.97e9 - 1) < 0.15 and abs(st.total(1) / 1.65e9 - 1) < 0.15


@pytest.mark.parametrize("variant", sorted(FROZEN_PARAMS))
def test_analytic_macs_equal_executed(variant):
    model = nw.build_model(nw.ntu_config(60, gc=variant, frames=16, num_persons=2)).eval()
    x = np.random.default_rng(14).normal(size=(1, 2, 16, 25, 3))
    with tn.no_grad(), tn.count_macs() as c:
        nw.model_forward(model, x)
    assert c[0] == nw.count_flops(model).per_sample.macs


def test_flop_report_lines():
    lines = nw.count_flops(nw.build_model(SMALL)).lines()
    assert sum(1 for line in lines if line.startswith("flops scope=")) == 4


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_roundtrip_logits(tmp_path):
    model = nw.build_model(SMALL, seed=7)
    nw.round_to_storage(model)
    model.eval()
    path = tmp_path / "m.ckpt"
    nw.save_checkpoint(model, path)
    back = nw.load_checkpoint(path, SMALL).eval()
    x = batch(np.random.default_rng(15))
    assert np.array_equal(logits(model, x), logits(back, x))
    assert path.read_bytes() == nw.encode_checkpoint(back)


def test_checkpoint_header_errors():
    model = nw.build_model(SMALL)
    blob = nw.encode_checkpoint(model)
    with pytest.raises(FormatError, match="hash"):
        nw.decode_checkpoint(blob, SMALL.replace(num_classes=5))
    with pytest.raises(FormatError, match="magic"):
        nw.decode_checkpoint(b"XXXX" + blob[4:], SMALL)
    with pytest.raises(FormatError, match="version"):
        nw.decode_checkpoint(blob[:4] + struct.pack("<I", 9) + blob[8:], SMALL)
    with pytest.raises(FormatError, match="truncated"):
        nw.decode_checkpoint(blob[:-3], SMALL)
    with pytest.raises(FormatError, match="trailing"):
        nw.decode_checkpoint(blob + b"\0", SMALL)


def encode_entries(config, entries):
    out = [b"CTRC", struct.pack("<IQI", 1, config.hash64(), len(entries))]
    for name, t in entries:
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.data.astype("<f4").tobytes())
    return b"".join(out)


def test_checkpoint_missing_entry_names_path():
    entries = list(nw.build_model(SMALL).named_tensors())
    name = entries[5][0]
    blob = encode_entries(SMALL, entries[:5] + entries[6:])
    with pytest.raises(FormatError, match=name.replace(".", r"\.")):
        nw.decode_checkpoint(blob, SMALL)


def test_checkpoint_unexpected_entry():
    entries = list(nw.build_model(SMALL).named_tensors())
    blob = encode_entries(SMALL, entries + [("extra.weight", Tensor(np.zeros(2)))])
    with pytest.raises(FormatError, match="extra"):
        nw.decode_checkpoint(blob, SMALL)


def test_config_hash_is_stable():
    assert SMALL.hash64() == nw.ModelConfig(**{**SMALL.__dict__}).hash64()
    assert SMALL.hash64() != SMALL.replace(r=2).hash64()


# -- topology dumps -----------------------------------------------------------

def test_alpha_zero_refined_equals_shared():
    model = nw.build_model(SMALL.replace(alpha_init=0.0))
    sample = batch(np.random.default_rng(16), b=1)[0]
    stanzas = nw.parse_topology_dump(nw.dump_topologies(model, sample, channels=(0, 3)))
    shared = {}
    for header, mat in stanzas:
        key = (header["block"], header["branch"])
        if header["kind"] == "A":
            shared[key] = mat
        else:
            assert np.array_equal(mat, shared[key])
    assert len(stanzas) == 3 * 3 * 3


def test_different_samples_share_a_but_not_r():
    model = nw.build_model(SMALL)
    rng = np.random.default_rng(17)
    first = nw.parse_topology_dump(nw.dump_topologies(model, batch(rng, b=1)[0], blocks=[1]))
    second = nw.parse_topology_dump(nw.dump_topologies(model, batch(rng, b=1)[0], blocks=[1]))
    for (h1, m1), (h2, m2) in zip(first, second):
        assert h1 == h2
        if h1["kind"] == "A":
            assert np.array_equal(m1, m2)
        else:
            assert np.max(np.abs(m1 - m2)) > 1e-3


def test_dump_leaves_running_stats_alone():
    model = nw.build_model(SMALL)
    before = [t.data.copy() for _, t in model.named_buffers()]
    nw.dump_topologies(model, batch(np.random.default_rng(18), b=1)[0])
    assert all(np.array_equal(a, t.data) for a, (_, t) in zip(before, model.named_buffers()))
    assert model.training


def test_dump_range_errors():
    model = nw.build_model(SMALL)
    sample = batch(np.random.default_rng(19), b=1)[0]
    with pytest.raises(IndexError):
        nw.dump_topologies(model, sample, channels=(8,), blocks=[1])
    with pytest.raises(IndexError):
        nw.dump_topologies(model, sample, blocks=[4])


def test_tiny_grad_check_config_builds():
    model = nw.build_model(TINY_CONFIG)
    assert [b.out_channels for b in model.blocks] == [8, 16] and model.num_joints == 5
