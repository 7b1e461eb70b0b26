import io

import pytest
import torch

from dskd.backbone import (
    ShapeError,
    TeacherLoadError,
    build_decoder,
    build_encoder,
    build_teacher,
    l2_normalize,
    pyramid_shapes,
)


@pytest.mark.parametrize("size", [128, 256])
def test_teacher_shapes(teacher, size):
    pyr = teacher(torch.randn(1, 3, size, size))
    assert [tuple(f.shape) for f in pyr] == pyramid_shapes(size)


def test_teacher_shapes_256_literal(teacher):
    pyr = teacher(torch.randn(1, 3, 256, 256))
    assert [tuple(f.shape) for f in pyr] == [(1, 64, 64, 64), (1, 128, 32, 32), (1, 256, 16, 16)]


def test_shape_law_and_channel_growth(teacher):
    s = 96
    pyr = teacher(torch.randn(2, 3, s, s))
    for k, f in enumerate(pyr, 1):
        assert f.shape[-1] == s // 2 ** (k + 1)
    chans = [f.shape[1] for f in pyr]
    assert chans == sorted(set(chans))


def test_teacher_deterministic(teacher):
    x = torch.randn(1, 3, 64, 64)
    a, b = teacher(x), teacher(x)
    for u, v in zip(a, b):
        assert torch.equal(u, v)


def test_teacher_is_frozen(teacher):
    assert not teacher.training
    assert all(not p.requires_grad for p in teacher.parameters())


def test_random_teacher_batchnorm_is_calibrated(teacher):
    bns = [m for m in teacher.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    assert bns
    for m in bns:
        assert not torch.all(m.running_var == 1) and not torch.all(m.running_mean == 0)


def test_random_teacher_reproducible_from_seed():
    a, b = build_teacher("random", seed=5), build_teacher("random", seed=5)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_input_not_divisible_by_32(teacher):
    with pytest.raises(ShapeError):
        teacher(torch.randn(1, 3, 100, 100))


def test_missing_teacher_weights(tmp_path):
    with pytest.raises(TeacherLoadError):
        build_teacher(tmp_path / "nope.pth")


def test_corrupt_teacher_weights(tmp_path):
    bad = tmp_path / "bad.pth"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(TeacherLoadError):
        build_teacher(bad)


def test_incomplete_teacher_weights(tmp_path):
    path = tmp_path / "partial.pth"
    torch.save({"conv1.weight": torch.zeros(64, 3, 7, 7)}, path)
    with pytest.raises(TeacherLoadError):
        build_teacher(path)


def test_teacher_from_torchvision_state_dict(tmp_path):
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    path = tmp_path / "r18.pth"
    torch.save(net.state_dict(), path)
    t = build_teacher(path)
    assert torch.equal(t.layer3[1].conv2.weight, net.layer3[1].conv2.weight)


def test_encoder_matches_teacher_shapes(teacher):
    x = torch.randn(1, 3, 256, 256)
    enc = build_encoder(0).eval()
    assert [f.shape for f in enc(x)] == [f.shape for f in teacher(x)]


def test_encoder_with_copied_weights_equals_teacher(teacher):
    enc = build_encoder(5)
    enc.load_state_dict(teacher.state_dict())
    enc.eval()
    x = torch.randn(2, 3, 64, 64)
    for a, b in zip(enc(x), teacher(x)):
        assert (a - b).abs().max() < 1e-4


def test_encoder_seeds_differ():
    x = torch.randn(1, 3, 64, 64)
    a = build_encoder(0).eval()(x)
    b = build_encoder(1).eval()(x)
    assert not torch.allclose(a[2], b[2])


@pytest.mark.parametrize(
    "emb, expected",
    [
        ((1, 256, 16, 16), [(1, 64, 64, 64), (1, 128, 32, 32), (1, 256, 16, 16)]),
        ((1, 256, 8, 8), [(1, 64, 32, 32), (1, 128, 16, 16), (1, 256, 8, 8)]),
    ],
)
def test_decoder_shapes(emb, expected):
    dec = build_decoder(0).eval()
    assert [tuple(f.shape) for f in dec(torch.randn(*emb))] == expected


def test_decoder_zero_embedding_is_finite():
    dec = build_decoder(0).eval()
    for f in dec(torch.zeros(1, 256, 4, 4)):
        assert torch.isfinite(f).all()


def test_decoder_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        build_decoder(0)(torch.zeros(1, 128, 4, 4))


def test_l2_normalize_examples():
    f = torch.zeros(1, 2, 1, 3)
    f[0, :, 0, 0] = torch.tensor([3.0, 4.0])
    f[0, :, 0, 1] = torch.tensor([0.6, 0.8])
    (out,) = l2_normalize([f])
    assert torch.allclose(out[0, :, 0, 0], torch.tensor([0.6, 0.8]))
    assert torch.allclose(out[0, :, 0, 1], torch.tensor([0.6, 0.8]))
    assert torch.equal(out[0, :, 0, 2], torch.zeros(2))


def test_l2_normalize_idempotent_and_unit(teacher):
    pyr = teacher(torch.randn(2, 3, 64, 64))
    once = l2_normalize(pyr)
    twice = l2_normalize(once)
    for a, b in zip(once, twice):
        assert (a - b).abs().max() < 1e-6
        norms = torch.linalg.vector_norm(a, dim=1)
        nonzero = torch.linalg.vector_norm(b, dim=1) > 0
        assert ((norms[nonzero] - 1).abs() <= 1e-4).all()
        assert a.shape == b.shape


def test_serialized_teacher_unchanged_by_forward(teacher):
    def dump():
        buf = io.BytesIO()
        torch.save(teacher.state_dict(), buf)
        return buf.getvalue()

    before = dump()
    teacher(torch.randn(4, 3, 64, 64))
    assert dump() == before
