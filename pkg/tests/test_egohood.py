import math

import numpy as np
import pytest

from hoodval.egohood import (
    ContiguityMatrix,
    DesignMatrix,
    FeatureTable,
    PropertyEncoder,
    assemble_design_matrix,
    build_contiguity,
    egohood_features,
    format_cell,
    parse_cell,
    read_design_csv,
    read_design_schema,
    row_normalize,
    write_design_schema,
)
from hoodval.geomodel import CensusBlock, HoodvalError, Listing


RING = [[(0, 0), (0.001, 0), (0.001, 0.001), (0, 0.001), (0, 0)]]


def block_at(bid, lon, lat):
    return CensusBlock(id=bid, polygon=RING, centroid=(lon, lat), area_m2=1.0)


def meters_to_lon(m, lat):
    return m / (111320.0 * math.cos(math.radians(lat)))


def line_blocks(spacing_m=800.0, n=3, lat=45.0):
    return [block_at(f"b{i}", meters_to_lon(spacing_m * i, lat), lat)
            for i in range(n)]


def gc_dist_m(lon1, lat1, lon2, lat2):
    # oracle-side haversine, written independently of the package geo module
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * 6371000.0 * math.asin(math.sqrt(a))


def test_line_fixture_exact():
    blocks = line_blocks()
    w = build_contiguity(blocks, radius_m=1000.0)
    dense = w.matrix.toarray()
    assert np.array_equal(dense, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    wn = row_normalize(w)
    f = FeatureTable(block_ids=[b.id for b in blocks], columns=["v"],
                     values=np.array([[1.0], [2.0], [9.0]]))
    e = egohood_features(wn, f)
    assert e.values.tolist() == [[2.0], [5.0], [2.0]]


def test_row_normalization_values():
    wn = row_normalize(build_contiguity(line_blocks()))
    assert wn.matrix.toarray().tolist() == [[0.0, 1.0, 0.0],
                                            [0.5, 0.0, 0.5],
                                            [0.0, 1.0, 0.0]]


def test_single_block_and_strict_boundary():
    from hoodval.geo import haversine_many_m

    w = build_contiguity([block_at("only", 7.6, 45.0)])
    assert w.matrix.toarray().tolist() == [[0.0]]
    assert w.isolated().tolist() == [True]

    lat = 45.0
    a = block_at("a", 0.0, lat)
    b = block_at("b", meters_to_lon(1000.0, lat), lat)
    d = float(haversine_many_m(*a.centroid, np.array([b.centroid[0]]),
                               np.array([b.centroid[1]]))[0])
    # blocks separated by exactly the radius are not neighbors (strict <)
    assert build_contiguity([a, b], radius_m=d).matrix[0, 1] == 0
    assert build_contiguity([a, b], radius_m=d * (1 + 1e-12)).matrix[0, 1] == 1


def test_isolated_blocks_copy_own_row():
    blocks = [block_at("a", 0.0, 0.0), block_at("b", 1.0, 0.0)]  # ~111 km apart
    wn = row_normalize(build_contiguity(blocks))
    f = FeatureTable(block_ids=["a", "b"], columns=["v"],
                     values=np.array([[3.0], [7.0]]))
    e = egohood_features(wn, f)
    assert e.values.tolist() == [[3.0], [7.0]]


def test_missing_values_renormalize():
    blocks = line_blocks(spacing_m=500.0)  # all three mutually adjacent
    wn = row_normalize(build_contiguity(blocks))
    f = FeatureTable(block_ids=[b.id for b in blocks], columns=["v"],
                     values=np.array([[1.0], [np.nan], [5.0]]))
    e = egohood_features(wn, f)
    # b0 averages only its finite neighbor b2, and vice versa
    assert e.values[0, 0] == 5.0
    assert e.values[1, 0] == 3.0
    assert e.values[2, 0] == 1.0

    f_all_nan = FeatureTable(block_ids=[b.id for b in blocks], columns=["v"],
                             values=np.array([[np.nan]] * 3))
    e = egohood_features(wn, f_all_nan)
    assert np.isnan(e.values).all()


def random_instance(rng, n_blocks):
    lat0 = 45.0
    blocks = [block_at(f"b{i:03d}",
                       meters_to_lon(float(rng.uniform(0, 4000)), lat0),
                       lat0 + float(rng.uniform(0, 4000)) / 111320.0)
              for i in range(n_blocks)]
    vals = rng.normal(size=(n_blocks, 3))
    vals[rng.uniform(size=vals.shape) < 0.2] = np.nan
    ids = [b.id for b in blocks]
    return blocks, FeatureTable(block_ids=ids, columns=["x", "y", "z"], values=vals)


def oracle_egohood(blocks, f, radius_m=1000.0):
    ordered = sorted(blocks, key=lambda b: b.id)
    n = len(ordered)
    e = np.full_like(f.values, np.nan)
    for i, bi in enumerate(ordered):
        nbrs = [j for j, bj in enumerate(ordered)
                if j != i and gc_dist_m(*bi.centroid, *bj.centroid) < radius_m]
        if not nbrs:
            e[i] = f.values[i]
            continue
        for c in range(f.values.shape[1]):
            vals = [f.values[j, c] for j in nbrs if np.isfinite(f.values[j, c])]
            e[i, c] = np.mean(vals) if vals else np.nan
    return e


def test_random_instances_match_oracle():
    rng = np.random.default_rng(123)
    for trial in range(50):
        n = int(rng.integers(2, 40))
        blocks, f = random_instance(rng, n)
        w = build_contiguity(blocks, radius_m=1000.0)
        wn = row_normalize(w)

        sums = np.asarray(wn.matrix.sum(axis=1)).ravel()
        deg = w.degrees()
        assert np.all(np.abs(sums[deg > 0] - 1.0) < 1e-12), trial
        assert np.all(sums[deg == 0] == 0.0), trial

        got = egohood_features(wn, f).values
        want = oracle_egohood(blocks, f)
        both = np.isfinite(got) & np.isfinite(want)
        assert np.array_equal(np.isfinite(got), np.isfinite(want)), trial
        assert np.max(np.abs(got[both] - want[both]), initial=0.0) < 1e-9, trial


def test_alignment_errors():
    blocks = line_blocks()
    wn = row_normalize(build_contiguity(blocks))
    f = FeatureTable(block_ids=["x", "y", "z"], columns=["v"],
                     values=np.zeros((3, 1)))
    with pytest.raises(HoodvalError):
        egohood_features(wn, f)
    with pytest.raises(HoodvalError):
        egohood_features(build_contiguity(blocks),
                         FeatureTable(block_ids=[b.id for b in blocks],
                                      columns=["v"], values=np.zeros((3, 1))))


def test_feature_table_sorts_and_roundtrips(tmp_path):
    t = FeatureTable(block_ids=["b", "a"], columns=["v"],
                     values=np.array([[2.0], [np.nan]]))
    assert t.block_ids == ["a", "b"]
    assert np.isnan(t.values[0, 0]) and t.values[1, 0] == 2.0
    p = tmp_path / "t.csv"
    t.write_csv(p)
    back = FeatureTable.read_csv(p)
    assert back.block_ids == t.block_ids and back.columns == t.columns
    assert np.array_equal(np.isnan(back.values), np.isnan(t.values))
    assert back.values[1, 0] == 2.0


def test_cell_formatting():
    assert format_cell(float("nan")) == ""
    assert parse_cell("") != parse_cell("")  # NaN
    x = 0.1 + 0.2
    assert parse_cell(format_cell(x)) == x


def listing(lid, bid, **attrs):
    return Listing(id=lid, location=(7.6, 45.0), asked_price=100000.0,
                   posted_date=None, property_attributes=attrs, ego_place_id=bid)


def tiny_tables():
    ids = ["b0", "b1"]
    f = FeatureTable(block_ids=ids, columns=["pop"],
                     values=np.array([[10.0], [20.0]]))
    e = FeatureTable(block_ids=ids, columns=["pop"],
                     values=np.array([[20.0], [10.0]]))
    return f, e


def test_design_matrix_layout():
    f, e = tiny_tables()
    listings = [
        listing("l1", "b0", square_meters=70.0, garden=True, property_kind="apartment"),
        listing("l2", "b1", square_meters=55.0, garden=False, property_kind="loft"),
    ]
    d = assemble_design_matrix(listings, f, e)
    labels = d.labels
    assert "property:square_meters" in labels
    assert "property:garden" in labels
    assert "property:property_kind=apartment" in labels
    assert "ego-place:pop" in labels and "egohood:pop" in labels
    # property columns first, then ego-place, then egohood
    groups = [c.group for c in d.columns]
    assert groups == sorted(groups, key=["property", "ego-place", "egohood"].index)

    i_sm = labels.index("property:square_meters")
    i_f = labels.index("ego-place:pop")
    i_e = labels.index("egohood:pop")
    row1 = d.x[d.ids.index("l1")]
    assert row1[i_sm] == 70.0 and row1[i_f] == 10.0 and row1[i_e] == 20.0
    # one-hot: exactly one level active per encoded listing
    onehot = [j for j, c in enumerate(d.columns) if c.name.startswith("property_kind=")]
    assert d.x[:, onehot].sum(axis=1).tolist() == [1.0, 1.0]


def test_encoder_missing_semantics():
    f, e = tiny_tables()
    train = [
        listing("l1", "b0", garden=True, property_kind="apartment"),
        listing("l2", "b1", garden=False, property_kind="loft"),
    ]
    enc = PropertyEncoder.fit(train)
    enc_roundtrip = PropertyEncoder.from_dict(enc.to_dict())

    new = [listing("l3", "b0", property_kind="castle")]  # unseen level, no garden
    d2 = assemble_design_matrix(new, f, e, encoder=enc_roundtrip)
    labels = d2.labels
    row = d2.x[0]
    onehot = [j for j, lab in enumerate(labels) if "property_kind=" in lab]
    assert row[onehot].sum() == 0.0  # unknown level encodes to all zeros
    assert row[labels.index("property:garden")] == 0.0  # missing boolean -> 0
    assert np.isnan(row[labels.index("property:square_meters")])


def test_design_csv_roundtrip(tmp_path):
    f, e = tiny_tables()
    listings = [listing("l1", "b0", square_meters=70.0),
                listing("l2", "b1", square_meters=55.0)]
    d = assemble_design_matrix(listings, f, e)
    d.write_csv(tmp_path / "design.csv", tmp_path / "targets.csv")
    ids, x, cols, y = read_design_csv(tmp_path / "design.csv", tmp_path / "targets.csv")
    assert ids == d.ids
    assert [c.label for c in cols] == d.labels
    assert np.allclose(x, d.x, equal_nan=True)
    assert np.array_equal(y, d.y)


def test_design_schema_roundtrip(tmp_path):
    f, _ = tiny_tables()
    enc = PropertyEncoder.fit([listing("l1", "b0", property_kind="attic")])
    p = tmp_path / "schema.json"
    write_design_schema(p, enc, f.columns)
    enc2, cols = read_design_schema(p)
    assert cols == f.columns
    assert enc2.to_dict() == enc.to_dict()
