import numpy as np
import pytest

from ppdepth.depth import encode
from ppdepth.dit import ConfigError
from ppdepth.io import FormatError, read_manifest
from ppdepth.metrics import canny_edges, chamfer_edge, unproject
from ppdepth.synth import SceneSpec, _render, generate, generate_one, load_dataset, save_dataset, split


@pytest.fixture(scope="module")
def ds():
    return generate(SceneSpec(seed=3), 24)


def test_deterministic(ds):
    again = generate(SceneSpec(seed=3), 24)
    for a, b in zip(ds, again):
        assert a.id == b.id and a.image.tobytes() == b.image.tobytes() and a.depth.tobytes() == b.depth.tobytes()
    other = generate(SceneSpec(seed=4), 2)
    assert other[0].depth.tobytes() != ds[0].depth.tobytes()


def test_sample_index_independent(ds):
    assert generate_one(SceneSpec(seed=3), 7).depth.tobytes() == ds[7].depth.tobytes()


def test_sample_invariants(ds):
    spec = SceneSpec()
    for s in ds:
        assert s.image.shape == (64, 64, 1) and s.image.dtype == np.float32
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert np.all(s.depth > 0) and s.depth_map.n_valid == 64 * 64
        assert s.depth.min() >= spec.depth_min - 1e-4 and s.depth.max() <= spec.depth_max + 1e-4
        n = encode(s.depth)  # no degenerate-depth error
        assert np.abs(n.values).max() <= spec.range_limit
        jump = max(np.abs(np.diff(s.depth, axis=0)).max(), np.abs(np.diff(s.depth, axis=1)).max())
        assert jump >= 2.0
        frac = canny_edges(s.depth_map, dilation_radius=0).edges.mean()
        assert 0.01 <= frac <= 0.15


def test_gt_self_chamfer_zero(ds):
    for s in ds[:5]:
        m = canny_edges(s.depth_map).mask
        pc = unproject(s.depth_map, s.intrinsics, m)
        assert len(pc) > 0 and chamfer_edge(pc, pc) == 0


def test_zbuffer_nearest_wins(monkeypatch):
    """Two overlapping squares: the overlap takes the nearer object's depth."""
    import ppdepth.synth as synth
    squares = iter([(slice(10, 40), slice(10, 40)), (slice(25, 55), slice(25, 55))])

    def fixed(kind, rng, h, w):
        m = np.zeros((h, w), dtype=bool)
        m[next(squares)] = True
        return m

    monkeypatch.setattr(synth, "_shape_mask", fixed)
    spec = SceneSpec(min_objects=2, max_objects=2)
    _, depth = _render(spec, np.random.default_rng(5))
    za = depth[26, 24]  # just left of the overlap, object A only
    zb = depth[41, 41]  # just below-right of the overlap, object B only
    overlap = depth[26, 26]
    assert overlap == pytest.approx(min(za, zb), rel=0.02)
    assert depth[5, 5] > max(za, zb)  # background behind both


def test_objects_in_front_of_background(ds):
    spec = SceneSpec()
    for s in ds:
        far = s.depth >= spec.background_near[0]
        assert far.any()  # some background visible
        near = ~far
        if near.any():
            assert s.depth[near].max() <= s.depth[far].min()


def test_spec_validation():
    for bad in (dict(min_objects=0), dict(primitives=("hexagon",)), dict(depth_min=0.0),
                dict(background_near=(0.5, 60.0)), dict(background_tilt=1.5), dict(height=4)):
        with pytest.raises(ConfigError):
            SceneSpec.from_dict(bad)
    with pytest.raises(ConfigError):
        SceneSpec.from_dict({"colour": 1})
    assert SceneSpec.from_dict(SceneSpec().to_dict()) == SceneSpec()


def test_split_properties(ds):
    tr, va, te = split(ds, (0.5, 0.25, 0.25), seed=1)
    ids = [set(x.ids) for x in (tr, va, te)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert ids[0] | ids[1] | ids[2] == set(ds.ids)
    assert (len(tr), len(va), len(te)) == (12, 6, 6)
    again = split(ds, (0.5, 0.25, 0.25), seed=1)
    assert [x.ids for x in again] == [x.ids for x in (tr, va, te)]
    assert split(ds, (0.5, 0.25, 0.25), seed=2)[0].ids != tr.ids
    a, b, c = split(ds, (1, 0, 0))
    assert len(a) == 24 and len(b) == 0 and len(c) == 0
    with pytest.raises(ValueError):
        split(ds, (0.5, 0.5, 0.5))


def test_save_load_roundtrip(tmp_path, ds):
    m = save_dataset(ds[:6], tmp_path / "d")
    assert len(read_manifest(m)) == 6
    back = load_dataset(tmp_path / "d")
    for a, b in zip(ds[:6], back):
        assert a.id == b.id and a.depth.tobytes() == b.depth.tobytes()
        assert np.max(np.abs(a.image - b.image)) <= 1 / 65535
        assert a.intrinsics == b.intrinsics


def test_load_missing_file_names_it(tmp_path, ds):
    save_dataset(ds[:2], tmp_path / "d")
    victim = tmp_path / "d" / "depths" / f"{ds[1].id}.pfm"
    victim.unlink()
    with pytest.raises(FormatError, match=ds[1].id):
        load_dataset(tmp_path / "d")
