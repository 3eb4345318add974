import json

import numpy as np
import pytest

from qkspace.attnmodel import init_head
from qkspace.contrastive import DeltaC, accumulate, make_triplets
from qkspace.datagen import TaskConfig, build_maps
from qkspace.dumps import (ActivationRecord, build_triplets, category_subspace, counterfactual_rule,
                           dump_delta, load_dump, match_rule, rank_curve, records_from_triplets,
                           restrict, rule_from_dict, write_dump)
from qkspace.errors import EmptyEstimateError, ParseError, SchemaError
from qkspace.tensorcore import make_rng


def rec(role, vec, **labels):
    return ActivationRecord(role, np.asarray(vec, dtype=float), {k: str(v) for k, v in labels.items()})


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_dump(tmp_path / "e.jsonl") == []


def test_roundtrip(tmp_path):
    records = [rec("query", [0.1, 0.2], prompt_id=1, category="fruit"),
               rec("key", [1e-17, -3.5], prompt_id=1, category="fruit"),
               rec("key", [2.0, 1.0 / 3.0], prompt_id=1, category="animal")]
    records[0].source = {"model": "m", "layer": 3, "head": 7}
    write_dump(tmp_path / "d.jsonl", records)
    back = load_dump(tmp_path / "d.jsonl")
    assert len(back) == 3
    for a, b in zip(records, back):
        assert a.role == b.role and a.labels == b.labels and a.source == b.source
        assert np.array_equal(a.vector, b.vector)


def test_float32_input_is_widened(tmp_path):
    v = np.float32(0.1)
    (tmp_path / "d.jsonl").write_text(json.dumps({"role": "key", "vector": [float(v)],
                                                  "labels": {"prompt_id": "0"}}) + "\n")
    r = load_dump(tmp_path / "d.jsonl")[0]
    assert r.vector.dtype == np.float64 and r.vector[0] == float(v)


@pytest.mark.parametrize("line, field", [
    ({"vector": [1.0], "labels": {"prompt_id": "0"}}, "role"),
    ({"role": "key", "labels": {"prompt_id": "0"}}, "vector"),
    ({"role": "key", "vector": [1.0]}, "labels"),
    ({"role": "key", "vector": [1.0], "labels": {}}, "labels.prompt_id"),
    ({"role": "value", "vector": [1.0], "labels": {"prompt_id": "0"}}, "role"),
    ({"role": "key", "vector": ["a"], "labels": {"prompt_id": "0"}}, "vector"),
])
def test_bad_records_name_field_and_line(tmp_path, line, field):
    good = {"role": "query", "vector": [1.0], "labels": {"prompt_id": "0"}}
    (tmp_path / "d.jsonl").write_text(json.dumps(good) + "\n" + json.dumps(line) + "\n")
    with pytest.raises(ParseError) as info:
        load_dump(tmp_path / "d.jsonl")
    assert info.value.line == 2 and info.value.field == field
    assert "line 2" in str(info.value) and field.split(".")[-1] in str(info.value)


def test_malformed_json_and_schema_errors(tmp_path):
    (tmp_path / "a.jsonl").write_text('{"role": "key",\n')
    with pytest.raises(ParseError) as info:
        load_dump(tmp_path / "a.jsonl")
    assert info.value.line == 1
    rows = [{"role": "key", "vector": [1.0, 2.0], "labels": {"prompt_id": "0"}},
            {"role": "key", "vector": [1.0], "labels": {"prompt_id": "0"}}]
    (tmp_path / "b.jsonl").write_text("\n".join(json.dumps(r) for r in rows))
    with pytest.raises(SchemaError):
        load_dump(tmp_path / "b.jsonl")
    (tmp_path / "c.jsonl").write_text(json.dumps({"schema": "qkspace-activations", "schema_version": 9}))
    with pytest.raises(SchemaError):
        load_dump(tmp_path / "c.jsonl")
    (tmp_path / "h.jsonl").write_text(json.dumps({"schema": "qkspace-activations", "schema_version": 1,
                                                  "d_head": 3}) + "\n" + json.dumps(rows[0]))
    with pytest.raises(SchemaError):
        load_dump(tmp_path / "h.jsonl")


def two_prompt_dump():
    out = []
    for pid, cat in (("p0", "fruit"), ("p1", "animal")):
        out.append(rec("query", [1.0, 0.0, 0.0] if cat == "fruit" else [0.0, 1.0, 0.0], prompt_id=pid, category=cat))
        out.append(rec("key", [1.0, 0.0, 0.0], prompt_id=pid, category="fruit"))
        out.append(rec("key", [0.0, 1.0, 0.0], prompt_id=pid, category="animal"))
    return out


def test_category_rule_on_two_prompts():
    triplets, stats = build_triplets(two_prompt_dump(), match_rule("category"), make_rng(0))
    assert len(triplets) == 2 and stats.triplets == 2 and stats.skipped == 0
    np.testing.assert_array_equal(triplets[0].k_plus, [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(triplets[1].k_plus, [0.0, 1.0, 0.0])


def test_query_selector_restricts_queries():
    rule = match_rule("category", query_where={"category": "fruit"}, name="fruit")
    triplets, stats = build_triplets(two_prompt_dump(), rule, make_rng(0))
    assert len(triplets) == 1 and stats.queries == 1


def test_counterfactual_without_partner_skips_everything():
    records = [rec("query", [1.0, 0.0], prompt_id="a"), rec("key", [1.0, 1.0], prompt_id="a", answer="true"),
               rec("query", [0.0, 1.0], prompt_id="b"), rec("key", [0.0, 1.0], prompt_id="b", answer="true")]
    with pytest.raises(EmptyEstimateError):
        build_triplets(records, counterfactual_rule("answer"), make_rng(0))
    # give prompt "a" a partner: its query is paired, prompt "b" is still skipped
    records.append(rec("key", [5.0, 5.0], prompt_id="c", answer="true", counterfactual_of="a"))
    triplets, stats = build_triplets(records, counterfactual_rule("answer"), make_rng(0))
    assert stats.queries == 2 and stats.skipped == 1 and len(triplets) == 1
    np.testing.assert_array_equal(triplets[0].k_minus, [5.0, 5.0])


def test_held_fixed_enforced_and_uniform_choice():
    records = [rec("query", [1.0, 0.0], prompt_id="0", order="1")]
    for i in range(4):
        records.append(rec("key", [float(i), 1.0], prompt_id="0", order="1", entity=f"e{i % 2}"))
        records.append(rec("key", [float(i), -1.0], prompt_id="0", order="2", entity=f"e{i % 2}"))
    rule = match_rule("order", held_fixed=("entity",))
    counts = {}
    for seed in range(400):
        (t,), _ = build_triplets(records, rule, make_rng(seed))
        assert int(t.k_plus[0]) % 2 == int(t.k_minus[0]) % 2
        key = (t.k_plus[0], t.k_minus[0])
        counts[key] = counts.get(key, 0) + 1
    # 8 valid pairs (same entity parity), each drawn about 50 times
    assert len(counts) == 8 and min(counts.values()) > 20
    a, _ = build_triplets(records, rule, make_rng(7))
    b, _ = build_triplets(records, rule, make_rng(7))
    assert np.array_equal(a[0].k_plus, b[0].k_plus)


def test_rule_from_dict():
    r = rule_from_dict({"type": "match", "label": "category", "held_fixed": ["entity"], "name": "cat"})
    assert r.name == "cat" and r.held_fixed == ("entity",)
    r = rule_from_dict({"type": "counterfactual", "label": "answer"})
    assert r.negative_from == "counterfactual"
    with pytest.raises(SchemaError):
        rule_from_dict({"type": "other"})


def test_category_subspace_examples():
    d = 6
    e = np.eye(d)
    deltas = [DeltaC(np.outer(e[i], e[i]), np.zeros((d, d)), 10, f"c{i}") for i in range(5)]
    joint = category_subspace(deltas)
    assert joint.rank == 5
    np.testing.assert_allclose(joint.u.T @ joint.u, np.eye(5), atol=1e-10)
    again = category_subspace(deltas + deltas[:1])
    assert again.rank == 5
    w = np.array([1.0, 1e-3, 0, 0, 0, 0]); w /= np.linalg.norm(w)
    close = [deltas[0], DeltaC(np.outer(w, w), np.zeros((d, d)), 10, "w")]
    pair = category_subspace(close)
    assert pair.rank == 2
    np.testing.assert_allclose(pair.u.T @ pair.u, np.eye(2), atol=1e-10)
    with pytest.raises(SchemaError):
        category_subspace([deltas[0], DeltaC(np.eye(3), np.zeros((3, 3)), 1, "x")])


def test_restrict_and_rank_curve():
    rng = np.random.default_rng(0)
    records = []
    dirs = np.eye(6)
    for p in range(60):
        cat = f"c{p % 3}"
        other = f"c{(p + 1) % 3}"
        records.append(rec("query", dirs[p % 3] + 0.01 * rng.standard_normal(6), prompt_id=p, category=cat))
        records.append(rec("key", dirs[p % 3], prompt_id=p, category=cat))
        records.append(rec("key", dirs[(p + 1) % 3], prompt_id=p, category=other))
    assert len(restrict(records, "category", ["c0"])) < len(records)
    curve = rank_curve(records, match_rule("category"), make_rng(0), "category", [1, 2, 3])
    assert [c["size"] for c in curve] == [1, 2, 3]
    assert curve[0]["triplets"] == 0 and curve[2]["rank"] >= curve[1]["rank"]


def test_dump_path_equals_direct_path(tmp_path):
    cfg = TaskConfig(d_head=8, r1=2, r2=3)
    maps = build_maps(cfg)
    head = init_head(cfg, make_rng(0))
    for target, other in (("z1", "z2"), ("z2", "z1")):
        tb = make_triplets(cfg, maps, head, target, make_rng(4, target), 3000)
        write_dump(tmp_path / f"{target}.jsonl", records_from_triplets(tb), cfg.d_head)
        records = load_dump(tmp_path / f"{target}.jsonl")
        d_dump, stats = dump_delta(records, match_rule(target, held_fixed=(other,)), make_rng(0))
        d_direct = accumulate(tb, target)
        assert stats.triplets == 3000 and stats.skipped == 0
        assert np.linalg.norm(d_dump.c_plus - d_direct.c_plus) < 1e-10
        assert np.linalg.norm(d_dump.delta - d_direct.delta) < 1e-10
