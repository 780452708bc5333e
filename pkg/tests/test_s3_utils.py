import pytest

from s3_utils import S3Uploader


class _Client:
    def __init__(self, fail_on=()):
        self.fail_on = set(fail_on)
        self.calls = []

    def upload_file(self, filename, bucket, key):
        if key.endswith(tuple(self.fail_on)):
            raise OSError("network down")
        self.calls.append((filename, bucket, key))


def test_keys_are_relative_to_output_root(tmp_path):
    uploader = S3Uploader("runs", prefix="/macc/desk/", client=_Client())
    assert uploader.key_for(tmp_path / "seed_0" / "trace.csv", tmp_path) == "macc/desk/seed_0/trace.csv"


def test_file_outside_root_is_refused(tmp_path):
    uploader = S3Uploader("runs", client=_Client())
    with pytest.raises(ValueError, match="outside"):
        uploader.key_for(tmp_path.parent / "elsewhere.csv", tmp_path)


def test_directory_upload_counts_failures(tmp_path):
    (tmp_path / "trace.csv").write_text("x", encoding="utf-8")
    (tmp_path / "best.json").write_text("{}", encoding="utf-8")
    (tmp_path / ".macc-tmp.part").write_text("", encoding="utf-8")
    client = _Client(fail_on=["best.json"])
    uploader = S3Uploader("runs", client=client)
    assert uploader.upload_directory(tmp_path) == (1, 1)
    assert [key for _, _, key in client.calls] == ["trace.csv"]
