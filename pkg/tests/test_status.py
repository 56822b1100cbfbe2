"""Tests for run status management functions."""
import json
import pytest


@pytest.mark.unit
class TestStatusManagement:
    """Test status loading and writing."""

    def test_load_status_not_exists(self, mock_study_paths):
        """Test loading status when file doesn't exist."""
        import study
        result = study.load_status("tc1_k1.5_h-version")
        assert result == {"status": "not_started", "progress": 0}

    def test_load_status_exists(self, mock_study_paths, test_status_dir):
        """Test loading status when file exists."""
        import study
        status_file = test_status_dir / "tc1_k1.5_h-version.json"
        status_data = {
            "run": "tc1_k1.5_h-version",
            "status": "running",
            "progress": 50,
            "timestamp": 1234567890
        }
        status_file.write_text(json.dumps(status_data))

        result = study.load_status("tc1_k1.5_h-version")
        assert result["status"] == "running"
        assert result["progress"] == 50
        assert result["run"] == "tc1_k1.5_h-version"

    def test_load_status_invalid_json(self, mock_study_paths, test_status_dir):
        """Test loading status with invalid JSON."""
        import study
        status_file = test_status_dir / "tc1_k1.5_h-version.json"
        status_file.write_text("invalid json")

        result = study.load_status("tc1_k1.5_h-version")
        assert result == {"status": "unknown", "progress": 0}

    def test_write_status_basic(self, mock_study_paths, test_status_dir):
        """Test writing basic status."""
        import study
        study.write_status("tc2_k1_h-version", "running", 50)

        status_file = test_status_dir / "tc2_k1_h-version.json"
        assert status_file.exists()

        data = json.loads(status_file.read_text())
        assert data["run"] == "tc2_k1_h-version"
        assert data["status"] == "running"
        assert data["progress"] == 50
        assert "timestamp" in data
        assert "message" not in data

    def test_write_status_with_message(self, mock_study_paths, test_status_dir):
        """Test writing status with message."""
        import study
        study.write_status("tc2_k1_h-version", "error", 0, message="SingularSystemError: pivot 3")

        data = json.loads((test_status_dir / "tc2_k1_h-version.json").read_text())
        assert data["message"] == "SingularSystemError: pivot 3"

    def test_write_status_with_artifact(self, mock_study_paths, test_status_dir):
        """Test writing status with the CSV artifact."""
        import study
        study.write_status("tc2_k1_h-version", "done", 100, artifact="results/tc2_k1_h-version.csv")

        data = json.loads((test_status_dir / "tc2_k1_h-version.json").read_text())
        assert data["artifact"] == "results/tc2_k1_h-version.csv"

    def test_write_then_load(self, mock_study_paths):
        """Test a written status is read back."""
        import study
        study.write_status("poly-exact_k1_p-version", "failed", 100, message="p=1: residual 1e-3")
        result = study.load_status("poly-exact_k1_p-version")
        assert result["status"] == "failed"
        assert result["message"] == "p=1: residual 1e-3"

    def test_status_path(self, mock_study_paths, test_status_dir):
        """Test status files are named after the run."""
        import study
        assert study.status_path("tc1_k3_h-version") == test_status_dir / "tc1_k3_h-version.json"
