import numpy as np
import pytest

from vitlab import autodiff as ad
from vitlab.autodiff import Tape, Tensor
from vitlab.autodiff.functional import broadcast_shape
from vitlab.common import GraphError, ShapeError, ViTConfig, PatchSpec
from vitlab.model import VisionTransformer, multi_head_attention
from vitlab.training import cross_entropy

TOLERANCE = 1e-4
SEEDS = range(100)


def _rel_error(analytic, numeric):
    # entries whose true gradient is 0 are measured against the tensor's scale
    floor = max(1e-3 * float(np.max(np.abs(numeric))), 1e-4)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _numeric_grad(loss_fn, arrays, which):
    target = arrays[which]
    grad = np.zeros_like(target)
    for idx in np.ndindex(target.shape):
        original = target[idx]
        h = 1e-5 * (1.0 + abs(original))
        target[idx] = original + h
        plus = loss_fn(arrays)
        target[idx] = original - h
        minus = loss_fn(arrays)
        target[idx] = original
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def _gradcheck(build, shapes, seed):
    """Compare reverse-mode gradients of ``sum(build(*inputs) * w)`` with
    central differences at float64."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=shape) for shape in shapes]
    with ad.precision(np.float64):
        with ad.no_grad():
            out_shape = build(*[Tensor(a) for a in arrays]).shape
        weights = rng.normal(size=out_shape)

        def loss_fn(arrs):
            with ad.no_grad():
                out = build(*[Tensor(a) for a in arrs])
            return float(np.sum(out.data * weights))

        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = (build(*tensors) * Tensor(weights)).sum()
        loss.backward()

    for i, tensor in enumerate(tensors):
        numeric = _numeric_grad(loss_fn, arrays, i)
        assert tensor.grad is not None
        assert _rel_error(tensor.grad, numeric).max() < TOLERANCE


OPS = {
    "add_bias": (lambda a, b: a + b, [(2, 3, 4), (4,)]),
    "add_batch": (lambda a, b: a + b, [(3, 4, 5), (1, 4, 5)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "mul": (lambda a, b: a * b, [(2, 5), (5,)]),
    "matmul_2d": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "matmul_batched_weight": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: a @ b, [(2, 2, 3, 4), (2, 2, 4, 3)]),
    "reshape": (lambda a: a.reshape(4, 6) * a.reshape(4, 6), [(2, 3, 4)]),
    "transpose": (lambda a: a.transpose(2, 0, 1), [(2, 3, 4)]),
    "index": (lambda a: a[:, 1], [(3, 4, 2)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 1, 3), (2, 4, 3)]),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4, 2)]),
    "mean": (lambda a: a.mean(axis=-1, keepdims=True), [(3, 5)]),
    "softmax": (lambda a: ad.softmax(a, axis=-1), [(3, 6)]),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b, 1e-6), [(2, 3, 6), (6,), (6,)]),
    "gelu": (lambda a: ad.gelu(a), [(4, 5)]),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, seed):
    build, shapes = OPS[name]
    _gradcheck(build, shapes, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradients(seed):
    labels = np.random.default_rng(100 + seed).integers(0, 4, size=5)
    _gradcheck(lambda logits: cross_entropy(logits, labels), [(5, 4)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_gradients(seed):
    def build(x, wqkv, bqkv, wproj, bproj):
        params = {
            "qkv.weight": wqkv,
            "qkv.bias": bqkv,
            "proj.weight": wproj,
            "proj.bias": bproj,
        }
        out, _ = multi_head_attention(x, params, num_heads=2)
        return out

    _gradcheck(build, [(2, 3, 4), (4, 12), (12,), (4, 4), (4,)], seed)


def test_full_vit_micro_gradients():
    config = ViTConfig.vit_micro(PatchSpec(p=14), num_classes=3)
    model = VisionTransformer(config, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    images = rng.random((2, 28, 28, 3))
    weights = rng.normal(size=(2, 3))

    def loss_value():
        with ad.no_grad():
            return float(np.sum(model.forward(images).logits.data * weights))

    with ad.precision(np.float64):
        model.zero_grad()
        loss = (model.forward(images).logits * Tensor(weights)).sum()
        loss.backward()

    pick = np.random.default_rng(1)
    checked = 0
    for name, tensor in model.params.items():
        flat = tensor.data.reshape(-1)
        grad = tensor.grad.reshape(-1)
        for i in pick.choice(flat.size, size=min(2, flat.size), replace=False):
            original = flat[i]
            h = 1e-5 * (1.0 + abs(original))
            flat[i] = original + h
            plus = loss_value()
            flat[i] = original - h
            minus = loss_value()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            assert _rel_error(grad[i], numeric) < TOLERANCE, name
            checked += 1
    assert checked >= 100


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()
    Tape.current().reset()


def test_backward_rejects_detached_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        x.sum().detach().backward()
    Tape.current().reset()


def test_backward_consumes_the_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = x.sum()
    loss.backward()
    assert len(Tape.current()) == 0
    with pytest.raises(GraphError):
        loss.backward()


def test_no_grad_records_nothing():
    Tape.current().reset()
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = (x * 3.0).sum()
    assert len(Tape.current()) == 0
    assert not y.requires_grad


def test_precision_controls_new_tensors():
    with ad.precision(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_broadcast_rules():
    assert broadcast_shape((2, 3, 4), (4,)) == (2, 3, 4)
    assert broadcast_shape((1, 1, 4), (5, 1, 4)) == (5, 1, 4)
    with pytest.raises(ShapeError):
        broadcast_shape((2, 3), (3, 2))


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        a @ b


def test_softmax_is_stable_for_large_logits():
    out = ad.softmax(Tensor(np.array([[1000.0, 1000.0]])), axis=-1)
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


def test_softmax_rejects_empty_axis():
    with pytest.raises(ShapeError):
        ad.softmax(Tensor(np.ones((2, 0))), axis=-1)


def test_gradients_match_torch_autograd():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 8))
    gamma, beta = rng.normal(size=8), rng.normal(size=8)

    with ad.precision(np.float64):
        tx, tg, tb = (Tensor(a, requires_grad=True) for a in (x, gamma, beta))
        out = ad.softmax(ad.gelu(ad.layer_norm(tx, tg, tb, 1e-6)), axis=-1)
        (out * Tensor(np.arange(8.0))).sum().backward()

    px, pg, pb = (torch.tensor(a, requires_grad=True) for a in (x, gamma, beta))
    ref = torch.nn.functional.layer_norm(px, (8,), pg, pb, eps=1e-6)
    ref = torch.softmax(torch.nn.functional.gelu(ref), dim=-1)
    (ref * torch.arange(8.0, dtype=torch.float64)).sum().backward()

    for ours, theirs in ((tx, px), (tg, pg), (tb, pb)):
        np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), rtol=1e-7, atol=1e-10)


def test_key_bias_gets_no_gradient():
    rng = np.random.default_rng(3)
    d = 4
    with ad.precision(np.float64):
        x = Tensor(rng.normal(size=(2, 3, d)))
        params = {
            "qkv.weight": Tensor(rng.normal(size=(d, 3 * d))),
            "qkv.bias": Tensor(rng.normal(size=3 * d), requires_grad=True),
            "proj.weight": Tensor(rng.normal(size=(d, d))),
            "proj.bias": Tensor(rng.normal(size=d)),
        }
        out, _ = multi_head_attention(x, params, num_heads=2)
        (out * Tensor(rng.normal(size=out.shape))).sum().backward()
    grad = params["qkv.bias"].grad
    np.testing.assert_allclose(grad[d : 2 * d], 0.0, atol=1e-12)
    assert np.abs(grad[2 * d :]).max() > 1e-3


def test_matmul_example():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_is_associative():
    rng = np.random.default_rng(0)
    with ad.no_grad(), ad.precision(np.float64):
        a, b, c = (Tensor(rng.normal(size=s)) for s in ((3, 4), (4, 5), (5, 2)))
        np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, rtol=1e-12)


def test_softmax_example_and_shift_invariance():
    with ad.precision(np.float64):
        x = np.array([[0.0, np.log(3.0)]])
        np.testing.assert_allclose(ad.softmax(Tensor(x)).data, [[0.25, 0.75]], rtol=1e-12)
        shifted = ad.softmax(Tensor(x + 17.5)).data
        np.testing.assert_allclose(shifted, [[0.25, 0.75]], rtol=1e-12)


def test_layer_norm_examples():
    with ad.precision(np.float64):
        gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
        out = ad.layer_norm(Tensor(np.array([[2.0, 4.0]])), gamma, beta, 1e-6)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)
        flat = ad.layer_norm(Tensor(np.full((3, 2), 7.0)), gamma, beta, 1e-6)
        np.testing.assert_array_equal(flat.data, 0.0)


def test_square_gradient_example():
    with ad.precision(np.float64):
        x = Tensor(np.array([3.0]), requires_grad=True)
        (x * x).sum().backward()
    assert x.grad[0] == 6.0


def test_softmax_sum_has_no_gradient():
    rng = np.random.default_rng(0)
    with ad.precision(np.float64):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        ad.softmax(x, axis=-1).sum().backward()
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_fan_out_doubles_the_gradient():
    values = np.array([-1.5, 0.2, 2.0])
    with ad.precision(np.float64):
        once = Tensor(values.copy(), requires_grad=True)
        ad.gelu(once).sum().backward()
        twice = Tensor(values.copy(), requires_grad=True)
        (ad.gelu(twice) + ad.gelu(twice)).sum().backward()
    np.testing.assert_array_equal(twice.grad, 2.0 * once.grad)
