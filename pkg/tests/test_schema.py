import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from strategies import SMALL, TINY

from replaycask.errors import SchemaInvalid
from replaycask.replay import Observation, ReplayMetadata, make_sequence
from replaycask.schema import (
    SCALAR_TYPES,
    FieldDescriptor,
    PlaneChannel,
    Schema,
    fnv1a64,
    validate_schema,
    warehouse_schema,
)


def _fnv_oracle(data: bytes) -> int:
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % 2**64
    return h


class TestValidation:
    def test_warehouse_ok(self):
        schema = warehouse_schema()
        assert validate_schema(schema).ok
        assert schema.instance_id == "robot_id"
        assert schema.position_fields == ("x_pos", "y_pos")
        assert schema.field_names[:4] == ["robot_id", "robot_type", "x_pos", "y_pos"]

    def test_no_fields(self):
        report = validate_schema(Schema(entity_fields=()))
        assert not report.ok
        assert "no instance_id field" in report.violations

    def test_duplicate_name(self):
        schema = Schema(
            entity_fields=(
                FieldDescriptor("id", "u32", role="instance_id"),
                FieldDescriptor("x", "f32"),
                FieldDescriptor("x", "u8"),
            )
        )
        assert "duplicate name x" in validate_schema(schema).violations

    def test_two_instance_ids(self):
        schema = Schema(
            entity_fields=(
                FieldDescriptor("a", "u32", role="instance_id"),
                FieldDescriptor("b", "u16", role="instance_id"),
            )
        )
        assert any(v.startswith("multiple instance_id") for v in validate_schema(schema).violations)

    def test_signed_instance_id(self):
        schema = Schema(entity_fields=(FieldDescriptor("a", "i32", role="instance_id"),))
        assert any("unsigned" in v for v in validate_schema(schema).violations)

    def test_single_position_field(self):
        schema = Schema(
            entity_fields=(
                FieldDescriptor("a", "u32", role="instance_id"),
                FieldDescriptor("x", "f32", role="position"),
            )
        )
        assert any("position" in v for v in validate_schema(schema).violations)

    def test_degenerate_plane_and_bad_types(self):
        schema = Schema(
            entity_fields=(FieldDescriptor("a", "u32", role="instance_id"), FieldDescriptor("b", "i16")),
            plane_channels=(PlaneChannel("p", 0, 4),),
            step_seconds=0,
        )
        v = validate_schema(schema).violations
        assert any("i16" in x for x in v)
        assert any("plane p" in x for x in v)
        assert any("step_seconds" in x for x in v)


class TestHash:
    def test_fnv_vectors(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    @given(st.binary(max_size=200))
    def test_fnv_matches_oracle(self, data):
        assert fnv1a64(data) == _fnv_oracle(data)

    def test_hash_changes_with_schema(self):
        other = Schema(entity_fields=TINY.entity_fields, step_seconds=0.5)
        assert other.hash != TINY.hash
        assert Schema(entity_fields=TINY.entity_fields).hash == TINY.hash

    @pytest.mark.parametrize("schema", [TINY, SMALL, warehouse_schema(), warehouse_schema(0.1)])
    def test_canonical_round_trip(self, schema):
        back = Schema.from_canonical_text(schema.canonical_text())
        assert back.canonical_text() == schema.canonical_text()
        assert back.hash == schema.hash
        assert back.entity_dtype == schema.entity_dtype

    def test_canonical_text_rejects_garbage(self):
        with pytest.raises(SchemaInvalid):
            Schema.from_canonical_text("hello\n")

    def test_dtypes_little_endian(self):
        for code in SCALAR_TYPES.values():
            assert np.dtype(code).byteorder in "<|="


class TestMetadata:
    @given(
        st.text(max_size=40),
        st.text(max_size=20),
        st.integers(0, 2**63),
        st.integers(0, 2**32),
        st.integers(0, 2**63),
        st.one_of(st.none(), st.integers(-(2**31), 2**31 - 1)),
        st.integers(0, 2**64 - 1),
    )
    def test_round_trip(self, rid, tag, dur, peak, actions, outcome, shash):
        meta = ReplayMetadata(rid, tag, dur, peak, actions, outcome, shash)
        assert ReplayMetadata.from_bytes(meta.to_bytes()) == meta

    def test_make_sequence_derives_fields(self):
        obs = [Observation(2, TINY.records([(1, 0), (2, 0), (3, 0)]), (), {})]
        seq = make_sequence(TINY, obs, 10, action_count=4)
        assert seq.metadata.duration_steps == 10
        assert seq.metadata.entity_count_peak == 3
        assert seq.metadata.schema_hash == TINY.hash

    def test_steps_must_increase(self):
        obs = [Observation(2, TINY.records(), (), {}), Observation(2, TINY.records(), (), {})]
        with pytest.raises(ValueError):
            make_sequence(TINY, obs)

    def test_step_beyond_declared(self):
        with pytest.raises(ValueError):
            make_sequence(TINY, [Observation(5, TINY.records(), (), {})], 5)
