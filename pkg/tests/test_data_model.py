import io
import json

import numpy as np
import numpy.testing as npt
import pytest

from hybrid_control.core.exceptions import DataValidationError
from hybrid_control.models.dataset import ColumnSchema, TrialDataset
from hybrid_control.services.data_service import DataService

SIX_ROWS = (
    "source,treatment,outcome,x1\n"
    "0,1,2.0,0.1\n"
    "0,0,1.0,-0.3\n"
    "0,1,2.5,0.7\n"
    "0,0,0.5,0.2\n"
    "1,0,1.5,-0.1\n"
    "1,0,0.9,0.4\n"
)


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestIngest:

    @pytest.fixture
    def schema(self):
        return ColumnSchema(covariates=["x1"])

    def test_six_row_file(self, tmp_path, schema):
        dataset = DataService.ingest_csv(write(tmp_path, SIX_ROWS), schema)
        assert dataset.group_sizes == {
            "n_rpct": 4, "n_treated": 2, "n_control": 2, "n_ec_1": 2, "n_ec": 2,
        }
        npt.assert_allclose(dataset.propensity, 0.5)
        assert dataset.ec_groups == [1]

    def test_treated_external_control_is_rejected(self, tmp_path, schema):
        text = SIX_ROWS.replace("1,0,1.5,-0.1", "1,1,1.5,-0.1")
        with pytest.raises(DataValidationError) as info:
            DataService.ingest_csv(write(tmp_path, text), schema)
        rules = [(v.row, v.rule) for v in info.value.violations]
        assert (4, "ec_treated") in rules
        assert "EC treated subject" in info.value.violations[0].message

    def test_missing_outcome_names_the_row(self, tmp_path, schema):
        text = SIX_ROWS.replace("0,0,1.0,-0.3", "0,0,,-0.3")
        with pytest.raises(DataValidationError) as info:
            DataService.ingest_csv(write(tmp_path, text), schema)
        violation = info.value.violations[0]
        assert (violation.row, violation.field, violation.rule) == (1, "outcome", "missing_value")

    def test_non_numeric_cell(self, tmp_path, schema):
        text = SIX_ROWS.replace("0,1,2.5,0.7", "0,1,2.5,abc")
        with pytest.raises(DataValidationError) as info:
            DataService.ingest_csv(write(tmp_path, text), schema)
        assert info.value.violations[0].rule == "non_numeric"

    def test_missing_column(self, tmp_path):
        with pytest.raises(DataValidationError) as info:
            DataService.ingest_csv(write(tmp_path, SIX_ROWS), ColumnSchema(covariates=["x1", "x2"]))
        assert [v.field for v in info.value.violations] == ["x2"]

    def test_missing_file(self, tmp_path, schema):
        with pytest.raises(DataValidationError):
            DataService.ingest_csv(tmp_path / "absent.csv", schema)

    def test_infer_schema(self, tmp_path):
        path = write(tmp_path, "record_id,source,treatment,outcome,age,bmi\nA,0,1,1.0,50,22\n")
        schema = DataService.infer_schema(path)
        assert schema.covariates == ["age", "bmi"]
        assert schema.record_id == "record_id"
        assert schema.propensity is None

    def test_empty_file(self, tmp_path, schema):
        path = write(tmp_path, "")
        for read in (DataService.infer_schema, lambda p: DataService.ingest_csv(p, schema)):
            with pytest.raises(DataValidationError) as info:
                read(path)
            assert info.value.violations[0].rule == "empty_file"

    def test_ragged_rows(self, tmp_path, schema):
        path = write(tmp_path, SIX_ROWS + "0,0,1.0,0.2,7,7\n")
        with pytest.raises(DataValidationError) as info:
            DataService.ingest_csv(path, schema)
        assert info.value.violations[0].rule == "malformed_csv"

    def test_emit_then_ingest_is_exact(self, tmp_path, simulated):
        path = tmp_path / "round.csv"
        schema = DataService.emit_csv(simulated, path)
        again = DataService.ingest_csv(path, schema)
        npt.assert_array_equal(again.outcome, simulated.outcome)
        npt.assert_array_equal(again.covariates, simulated.covariates)
        npt.assert_array_equal(again.source, simulated.source)
        npt.assert_array_equal(again.treatment, simulated.treatment)
        npt.assert_array_equal(again.propensity, simulated.propensity)
        assert again.record_ids == simulated.record_ids


class TestValidate:

    def test_simulated_dataset_is_clean(self, simulated):
        assert DataService.validate(simulated) == []

    def test_positivity_violation(self):
        dataset = TrialDataset(
            source=[0, 0, 0, 1], treatment=[1, 0, 1, 0], outcome=[1.0, 0.0, 1.0, 0.5],
            covariates=[[0.0], [1.0], [2.0], [3.0]], propensity=[0.5, 0.5, 0.0, 0.5],
        )
        violations = DataService.validate(dataset)
        assert [(v.row, v.rule) for v in violations] == [(2, "positivity")]

    def test_empty_control_arm(self):
        dataset = TrialDataset(
            source=[0, 0, 1], treatment=[1, 1, 0], outcome=[1.0, 2.0, 0.0],
            covariates=[[0.0], [1.0], [2.0]], propensity=0.5,
        )
        assert [v.rule for v in DataService.validate(dataset)] == ["empty_control_arm"]

    @pytest.mark.parametrize("source, outcome, rule", [
        ([0, 0, 1, 1], [1.0, 0.0, 0.5, 0.5], "ec_treated"),
        ([0, 0, 1, -1], [1.0, 0.0, 0.5, 0.5], "invalid_source"),
        ([0, 0, 1, 0], [1.0, 0.0, float("nan"), 0.5], "non_finite"),
    ])
    def test_record_rules(self, source, outcome, rule):
        dataset = TrialDataset(
            source=source, treatment=[1, 0, 0, 1 if rule == "ec_treated" else 0], outcome=outcome,
            covariates=[[0.0], [1.0], [2.0], [3.0]], propensity=0.5,
        )
        assert rule in [v.rule for v in DataService.validate(dataset)]

    def test_write_violations_as_json_lines(self):
        dataset = TrialDataset(
            source=[0, 0, 1], treatment=[1, 1, 0], outcome=[1.0, 2.0, 0.0],
            covariates=[[0.0], [1.0], [2.0]], propensity=0.5,
        )
        stream = io.StringIO()
        DataService.write_violations(DataService.validate(dataset), stream)
        line = json.loads(stream.getvalue().splitlines()[0])
        assert set(line) == {"row", "field", "rule", "message"}


class TestTrialDataset:

    def test_arrays_are_read_only(self, simulated):
        with pytest.raises(ValueError):
            simulated.outcome[0] = 1.0

    def test_restrict_to_group_keeps_order(self, two_group_dataset):
        group = two_group_dataset.restrict_to_group(2)
        assert group.n == two_group_dataset.n_rpct + 60
        assert set(group.source.tolist()) == {0, 2}
        assert group.record_ids[0] == "0"

    def test_with_outcome_keeps_design(self, simulated):
        shifted = simulated.with_outcome(simulated.outcome + 1.0)
        npt.assert_allclose(shifted.outcome - simulated.outcome, 1.0)
        npt.assert_array_equal(shifted.treatment, simulated.treatment)
