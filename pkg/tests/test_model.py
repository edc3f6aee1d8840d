import json

import numpy as np
import pytest

from handfit.errors import DataError, InvalidModel, NonWatertight, SchemaError
from handfit.model import load_model, model_from_dict, save_model
from handfit.synth_model import synth_test_model


@pytest.fixture(scope="module")
def payload():
    return synth_test_model(0).to_dict()


def test_synth_model_counts_and_determinism():
    m = synth_test_model(0)
    assert m.n_vertices == 512
    assert m.joint_regressor.shape == (21, 512)
    assert m.checksum == synth_test_model(0).checksum
    assert m.checksum != synth_test_model(1).checksum


def test_seed_changes_template():
    a, b = synth_test_model(0), synth_test_model(3)
    assert np.abs(a.template - b.template).max() > 1e-4


def test_roundtrip_is_exact(tmp_path, payload):
    m = model_from_dict(payload)
    path = tmp_path / "model.json"
    save_model(m, path)
    m2 = load_model(path)
    assert m2.checksum == m.checksum
    assert np.array_equal(m2.template, m.template)
    assert np.array_equal(m2.shape_bases, m.shape_bases)
    assert np.array_equal(m2.skinning_weights, m.skinning_weights)
    assert m2.joint_names == m.joint_names


def test_missing_file():
    with pytest.raises(DataError):
        load_model("/nonexistent/model.json")


def test_bad_json(tmp_path):
    p = tmp_path / "junk.json"
    p.write_text("{not json")
    with pytest.raises(SchemaError):
        load_model(p)


def test_wrong_major_version(payload):
    bad = json.loads(json.dumps(payload))
    bad["format_version"] = "2.0"
    with pytest.raises(SchemaError):
        model_from_dict(bad)


def test_skinning_row_sum_violation(payload):
    bad = json.loads(json.dumps(payload))
    bad["skinning_weights"][5] = [w * 0.9 for w in bad["skinning_weights"][5]]
    with pytest.raises(InvalidModel):
        model_from_dict(bad)


def test_negative_regressor_entry(payload):
    bad = json.loads(json.dumps(payload))
    bad["joint_regressor"][2][0] -= 0.5
    bad["joint_regressor"][2][1] += 0.5
    with pytest.raises(InvalidModel):
        model_from_dict(bad)


def test_open_edge_is_nonwatertight(payload):
    bad = json.loads(json.dumps(payload))
    del bad["faces"][17]
    bad["counts"]["faces"] -= 1
    with pytest.raises(NonWatertight):
        model_from_dict(bad)


def test_flipped_face_is_nonwatertight(payload):
    bad = json.loads(json.dumps(payload))
    a, b, c = bad["faces"][40]
    bad["faces"][40] = [a, c, b]
    with pytest.raises(NonWatertight):
        model_from_dict(bad)


def test_node_positions_must_match_regressor(payload):
    bad = json.loads(json.dumps(payload))
    bad["skeleton"]["node_positions"][3][1] += 1e-3
    with pytest.raises(InvalidModel):
        model_from_dict(bad)


def test_non_orthonormal_axes(payload):
    bad = json.loads(json.dumps(payload))
    bad["euler_conventions"][0]["bend"] = [-1.0, 0.1, 0.0]
    with pytest.raises(InvalidModel):
        model_from_dict(bad)


def test_checksum_mismatch(tmp_path, payload):
    m = model_from_dict(payload)
    path = tmp_path / "model.json"
    save_model(m, path)
    doc = json.loads(path.read_text())
    doc["checksum"] = "sha256:" + "0" * 64
    path.write_text(json.dumps(doc))
    with pytest.raises(InvalidModel):
        load_model(path)


def test_components_keep_clearance_across_seeds():
    # disjoint closed components must not touch at rest, with margin for the
    # shape modes used by the synthetic datasets
    sizes = [222, 58, 58, 58, 58, 58]
    for seed in range(6):
        m = synth_test_model(seed)
        comps, o = [], 0
        for s in sizes:
            comps.append(m.template[o:o + s])
            o += s
        best = 1.0
        for i in range(len(comps)):
            for j in range(i + 1, len(comps)):
                d = np.linalg.norm(comps[i][:, None] - comps[j][None], axis=2).min()
                best = min(best, d)
        assert best > 2.0e-3, f"seed {seed}: clearance {best*1000:.2f} mm"
