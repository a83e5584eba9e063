import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsdg import tasks
from fsdg.errors import (
    CapacityError,
    ContractError,
    FormatError,
    LengthError,
    ParseError,
    VersionError,
)
from fsdg.rng import RngStream
from helpers import noise_domain


def small_spec(**kw):
    base = dict(master_seed=7, domain_seed=0, n_classes=6, dim=5,
                samples_per_class=12, latent_dim=3)
    base.update(kw)
    return tasks.SyntheticDomainSpec(**base)


# ---------------------------------------------------------------------------
# Domain container


def test_domain_validates_class_shapes():
    with pytest.raises(ContractError):
        tasks.Domain("d", 3, {0: np.ones((4, 2))})
    with pytest.raises(ContractError):
        tasks.Domain("d", 3, {0: np.ones(3)})


def test_domain_locks_class_arrays():
    d = tasks.Domain("d", 2, {0: np.ones((3, 2))})
    with pytest.raises(ValueError):
        d.classes[0][0, 0] = 9.0


def test_domain_split_tags_validated():
    classes = {0: np.ones((2, 2)), 1: np.ones((2, 2))}
    with pytest.raises(ContractError):
        tasks.Domain("d", 2, dict(classes), splits={0: "holdout"})
    with pytest.raises(ContractError):
        tasks.Domain("d", 2, dict(classes), splits={5: "train"})


def test_class_ids_by_split():
    classes = {i: np.ones((2, 2)) for i in range(4)}
    d = tasks.Domain("d", 2, classes, splits={1: "val", 2: "test", 3: "train"})
    assert d.class_ids() == [0, 1, 2, 3]
    # untagged classes default to train
    assert d.class_ids("train") == [0, 3]
    assert d.class_ids("val") == [1]
    assert d.class_ids("test") == [2]
    with pytest.raises(ContractError):
        d.class_ids("holdout")


# ---------------------------------------------------------------------------
# synthetic generation


def test_generation_is_deterministic():
    a = tasks.generate_synthetic_domain(small_spec())
    b = tasks.generate_synthetic_domain(small_spec())
    assert a.class_ids() == b.class_ids()
    for cid in a.class_ids():
        assert np.array_equal(a.classes[cid], b.classes[cid])


def test_default_spec_sizes():
    spec = tasks.SyntheticDomainSpec(master_seed=1, domain_seed=2)
    assert (spec.n_classes, spec.dim, spec.samples_per_class) == (20, 16, 50)
    assert spec.name == "synth-1-2"
    d = tasks.generate_synthetic_domain(spec)
    assert d.n_classes == 20
    assert d.dim == 16
    assert d.classes[0].shape == (50, 16)


def test_spec_validation():
    with pytest.raises(ContractError):
        small_spec(n_classes=0)
    with pytest.raises(ContractError):
        small_spec(noise_sigma=-0.1)
    with pytest.raises(ContractError):
        small_spec(warp_strength=-1.0)


def test_latent_prototypes_depend_only_on_master_seed():
    a = tasks.latent_prototypes(7, 6, 3)
    b = tasks.latent_prototypes(7, 6, 3)
    c = tasks.latent_prototypes(8, 6, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_same_master_different_domain_seed_changes_warp_not_structure():
    d0 = tasks.generate_synthetic_domain(small_spec(domain_seed=0))
    d1 = tasks.generate_synthetic_domain(small_spec(domain_seed=1))
    assert d0.class_ids() == d1.class_ids()
    assert not np.array_equal(d0.classes[0], d1.classes[0])


def test_zero_warp_strength_gives_plain_tanh_mixture():
    spec = small_spec(warp_strength=0.0)
    d = tasks.generate_synthetic_domain(spec)
    for cid in d.class_ids():
        assert np.all(np.abs(d.classes[cid]) < 1.0)  # tanh * e^0 + 0


def test_zero_noise_collapses_each_class_to_a_point():
    spec = small_spec(noise_sigma=0.0)
    d = tasks.generate_synthetic_domain(spec)
    for cid in d.class_ids():
        arr = d.classes[cid]
        assert np.max(np.abs(arr - arr[0])) == 0.0


def test_generator_matches_direct_formula():
    spec = small_spec()
    d = tasks.generate_synthetic_domain(spec)
    from fsdg.rng import derive_seed

    protos = tasks.latent_prototypes(spec.master_seed, spec.n_classes, spec.latent_dim)
    warp = RngStream(derive_seed(spec.master_seed, "domain-warp", spec.domain_seed))
    mixing = warp.normals(spec.dim * spec.latent_dim).reshape(spec.dim, spec.latent_dim)
    mixing = mixing / spec.latent_dim**0.25
    scales = np.exp(spec.warp_strength * warp.normals(spec.dim))
    shifts = spec.warp_strength * warp.normals(spec.dim)
    noise = RngStream(derive_seed(spec.master_seed, "domain-noise", spec.domain_seed))
    cid = 3
    eps = noise.substream("class", cid).normals(
        spec.samples_per_class * spec.latent_dim).reshape(spec.samples_per_class, spec.latent_dim)
    want = np.tanh((protos[cid] + spec.noise_sigma * eps) @ mixing.T) * scales + shifts
    assert np.array_equal(d.classes[cid], want)


def test_sibling_domains_are_separated_beyond_class_spread():
    # Two domains sharing a master seed but with different warps: the mean
    # between-domain distance of same-class sample means must exceed three
    # times the within-domain class spread (RMS distance to the class mean),
    # measured over all 20 x 50 = 1000 samples per domain at default sizes.
    d1 = tasks.generate_synthetic_domain(
        tasks.SyntheticDomainSpec(master_seed=7, domain_seed=1))
    d2 = tasks.generate_synthetic_domain(
        tasks.SyntheticDomainSpec(master_seed=7, domain_seed=2))
    between, within = [], []
    for cid in d1.class_ids():
        xa, xb = d1.classes[cid], d2.classes[cid]
        mua, mub = xa.mean(axis=0), xb.mean(axis=0)
        between.append(np.linalg.norm(mua - mub))
        within.append(np.sqrt(np.mean(np.sum((xa - mua) ** 2, axis=1))))
        within.append(np.sqrt(np.mean(np.sum((xb - mub) ** 2, axis=1))))
    assert float(np.mean(between)) > 3.0 * float(np.mean(within))


def test_classes_are_separated_better_than_chance():
    # nearest-prototype in feature space on fresh draws should beat 1/K
    # comfortably for the default noise level
    spec = small_spec(n_classes=5, samples_per_class=40)
    d = tasks.generate_synthetic_domain(spec)
    means = {cid: d.classes[cid].mean(axis=0) for cid in d.class_ids()}
    correct = total = 0
    for cid in d.class_ids():
        for row in d.classes[cid]:
            best = min(means, key=lambda c: float(np.sum((row - means[c]) ** 2)))
            correct += best == cid
            total += 1
    assert correct / total > 0.6


# ---------------------------------------------------------------------------
# persistence round trips


def test_binary_round_trip_is_bit_exact(tmp_path):
    d = tasks.generate_synthetic_domain(small_spec())
    path = str(tmp_path / "dom.bin")
    tasks.save_domain(d, path)
    back = tasks.load_domain(path, name=d.name)
    assert back.name == d.name
    assert back.dim == d.dim
    assert back.class_ids() == d.class_ids()
    for cid in d.class_ids():
        assert np.array_equal(back.classes[cid], d.classes[cid])


def test_csv_round_trip_is_bit_exact(tmp_path):
    d = tasks.generate_synthetic_domain(small_spec(n_classes=3, samples_per_class=4))
    path = str(tmp_path / "dom.csv")
    tasks.save_domain(d, path)
    back = tasks.load_domain(path)
    for cid in d.class_ids():
        # repr round-trips doubles exactly
        assert np.array_equal(back.classes[cid], d.classes[cid])


def test_csv_header_layout(tmp_path):
    d = tasks.Domain("d", 2, {4: np.array([[0.5, -1.25]])})
    path = str(tmp_path / "dom.csv")
    tasks.save_domain(d, path)
    lines = open(path).read().splitlines()
    assert lines[0] == "class_id,f0,f1"
    assert lines[1] == "4,0.5,-1.25"


def test_binary_layout_header(tmp_path):
    d = tasks.Domain("d", 2, {7: np.array([[1.0, 2.0]])})
    path = str(tmp_path / "dom.bin")
    tasks.save_domain(d, path)
    raw = open(path, "rb").read()
    assert raw[:4] == b"FSDS"
    import struct

    version, n_classes, dim = struct.unpack("<III", raw[4:16])
    assert (version, n_classes, dim) == (1, 1, 2)
    cid, count = struct.unpack("<II", raw[16:24])
    assert (cid, count) == (7, 1)
    assert np.frombuffer(raw[24:], dtype="<f8").tolist() == [1.0, 2.0]


def test_load_binary_error_taxonomy(tmp_path):
    d = tasks.Domain("d", 2, {0: np.ones((3, 2))})
    path = str(tmp_path / "dom.bin")
    tasks.save_domain(d, path)
    raw = open(path, "rb").read()

    bad_magic = str(tmp_path / "bad_magic.bin")
    open(bad_magic, "wb").write(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        tasks.load_domain(bad_magic)

    bad_version = str(tmp_path / "bad_version.bin")
    import struct

    open(bad_version, "wb").write(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(VersionError):
        tasks.load_domain(bad_version)

    truncated = str(tmp_path / "trunc.bin")
    open(truncated, "wb").write(raw[:-8])
    with pytest.raises(LengthError):
        tasks.load_domain(truncated)

    empty = str(tmp_path / "empty.bin")
    open(empty, "wb").write(b"")
    with pytest.raises(LengthError):
        tasks.load_domain(empty)


def test_load_csv_error_taxonomy(tmp_path):
    def write(name, text):
        p = str(tmp_path / name)
        open(p, "w").write(text)
        return p

    with pytest.raises(ParseError):
        tasks.load_domain(write("empty.csv", ""))
    with pytest.raises(ParseError):
        tasks.load_domain(write("header.csv", "label,f0\n0,1.0\n"))
    with pytest.raises(ParseError):
        tasks.load_domain(write("cols.csv", "class_id,f0,fX\n0,1.0,2.0\n"))
    with pytest.raises(ParseError):
        tasks.load_domain(write("short.csv", "class_id,f0,f1\n0,1.0\n"))
    with pytest.raises(ParseError):
        tasks.load_domain(write("badnum.csv", "class_id,f0\n0,banana\n"))
    with pytest.raises(ParseError):
        tasks.load_domain(write("norows.csv", "class_id,f0\n"))


# ---------------------------------------------------------------------------
# episode sampling


def test_episode_shapes_and_labels():
    d = noise_domain(seed=1, n_classes=8, dim=4, per_class=10)
    ep = tasks.sample_episode(d, 5, 3, 2, RngStream(2))
    assert ep.support_x.shape == (15, 4)
    assert ep.query_x.shape == (10, 4)
    assert ep.support_y == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]
    assert ep.query_y == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
    assert len(ep.class_ids) == 5
    assert len(set(ep.class_ids)) == 5
    assert ep.domain_name == d.name


def test_episode_is_deterministic_in_the_stream():
    d = noise_domain(seed=3, n_classes=6, dim=3, per_class=9)
    a = tasks.sample_episode(d, 4, 2, 2, RngStream(5))
    b = tasks.sample_episode(d, 4, 2, 2, RngStream(5))
    assert a.class_ids == b.class_ids
    assert np.array_equal(a.support_x.data, b.support_x.data)
    assert np.array_equal(a.query_x.data, b.query_x.data)


def test_episode_support_and_query_rows_are_disjoint():
    # every row is unique in the noise domain, so overlap would show up as
    # an exact row match
    d = noise_domain(seed=4, n_classes=5, dim=6, per_class=8)
    for t in range(50):
        ep = tasks.sample_episode(d, 3, 2, 3, RngStream(100 + t))
        sup = {tuple(r) for r in ep.support_x.data}
        qry = {tuple(r) for r in ep.query_x.data}
        assert not sup & qry
        assert len(sup) == 6 and len(qry) == 9


def test_episode_respects_split_tags():
    d = noise_domain(seed=6, n_classes=6, dim=3, per_class=8)
    d = tasks.split_classes(d, (0.5, 0.0, 0.5), RngStream(7))
    test_ids = set(d.class_ids("test"))
    for t in range(20):
        ep = tasks.sample_episode(d, 3, 2, 2, RngStream(t), split="test")
        assert set(ep.class_ids) <= test_ids


def test_episode_capacity_errors_name_the_shortfall():
    d = noise_domain(seed=8, n_classes=3, dim=3, per_class=4)
    with pytest.raises(CapacityError, match="3 classes"):
        tasks.sample_episode(d, 5, 1, 1, RngStream(0))
    with pytest.raises(CapacityError, match="4 samples"):
        tasks.sample_episode(d, 2, 3, 2, RngStream(0))
    with pytest.raises(ContractError):
        tasks.sample_episode(d, 0, 1, 1, RngStream(0))


def test_episode_class_frequency_is_near_uniform():
    # over many draws every class should be picked n_way/K of the time
    d = noise_domain(seed=9, n_classes=10, dim=2, per_class=6)
    counts = {cid: 0 for cid in d.class_ids()}
    n_draws = 4000
    for t in range(n_draws):
        ep = tasks.sample_episode(d, 3, 1, 1, RngStream(derive(t)))
        for cid in ep.class_ids:
            counts[cid] += 1
    expected = n_draws * 3 / 10
    for cid, got in counts.items():
        assert abs(got - expected) / expected < 0.05, (cid, got, expected)


def derive(t):
    from fsdg.rng import derive_seed

    return derive_seed(1234, "freq-test", t)


# ---------------------------------------------------------------------------
# class splitting


def test_split_arithmetic_20_classes():
    d = noise_domain(seed=10, n_classes=20, dim=2, per_class=3)
    d = tasks.split_classes(d, (0.5, 0.25, 0.25), RngStream(11))
    assert len(d.class_ids("train")) == 10
    assert len(d.class_ids("val")) == 5
    assert len(d.class_ids("test")) == 5
    covered = d.class_ids("train") + d.class_ids("val") + d.class_ids("test")
    assert sorted(covered) == d.class_ids()


def test_split_is_deterministic_and_seed_sensitive():
    d = noise_domain(seed=12, n_classes=12, dim=2, per_class=3)
    a = tasks.split_classes(d, (0.5, 0.25, 0.25), RngStream(1))
    b = tasks.split_classes(d, (0.5, 0.25, 0.25), RngStream(1))
    c = tasks.split_classes(d, (0.5, 0.25, 0.25), RngStream(2))
    assert a.splits == b.splits
    assert a.splits != c.splits


def test_split_leaves_original_domain_untouched():
    d = noise_domain(seed=13, n_classes=6, dim=2, per_class=3)
    tagged = tasks.split_classes(d, (0.5, 0.0, 0.5), RngStream(3))
    assert d.splits == {}
    assert tagged.splits != {}
    assert tagged.classes is d.classes or all(
        np.array_equal(tagged.classes[c], d.classes[c]) for c in d.class_ids())


def test_split_fraction_validation():
    d = noise_domain(seed=14, n_classes=6, dim=2, per_class=3)
    with pytest.raises(ContractError):
        tasks.split_classes(d, (0.5, 0.2, 0.2), RngStream(0))
    with pytest.raises(ContractError):
        tasks.split_classes(d, (1.2, -0.1, -0.1), RngStream(0))


def test_split_zero_rounding_is_a_capacity_problem():
    d = noise_domain(seed=15, n_classes=5, dim=2, per_class=3)
    with pytest.raises(CapacityError):
        tasks.split_classes(d, (0.92, 0.04, 0.04), RngStream(0))


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5), st.integers(1, 3), st.integers(1, 3))
def test_episode_row_counts_and_label_ranges(seed, way, shot, query):
    d = noise_domain(seed=17, n_classes=6, dim=3, per_class=8)
    ep = tasks.sample_episode(d, way, shot, query, RngStream(seed))
    assert ep.support_x.shape == (way * shot, 3)
    assert ep.query_x.shape == (way * query, 3)
    assert sorted(set(ep.support_y)) == list(range(way))
    assert sorted(set(ep.query_y)) == list(range(way))
    assert all(ep.support_y.count(k) == shot for k in range(way))
    assert all(ep.query_y.count(k) == query for k in range(way))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_binary_round_trip_property(tmp_path_factory, seed):
    stream = RngStream(seed)
    n_classes = 1 + seed % 4
    dim = 1 + (seed // 4) % 5
    classes = {}
    for cid in range(n_classes):
        rows = 1 + int(stream.integers(1, 6)[0])
        classes[cid * 3] = stream.normals(rows * dim).reshape(rows, dim)
    d = tasks.Domain("prop", dim, classes)
    path = str(tmp_path_factory.mktemp("roundtrip") / "d.bin")
    tasks.save_domain(d, path)
    back = tasks.load_domain(path)
    assert back.class_ids() == d.class_ids()
    for cid in d.class_ids():
        assert np.array_equal(back.classes[cid], d.classes[cid])
