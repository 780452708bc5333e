"""Optional, failure-safe S3 upload of run outputs."""

import logging
from pathlib import Path


LOGGER = logging.getLogger("macc")


class S3Uploader:
    """Uploads files using the normal boto3 credential provider chain.

    ``client`` may be any object with boto3's ``upload_file`` signature.
    """

    def __init__(self, bucket, prefix="", endpoint_url=None, client=None):
        if client is None:
            try:
                import boto3
            except ImportError as exc:
                raise RuntimeError(
                    "S3 upload requires boto3. Install it with: pip install boto3"
                ) from exc
            client = boto3.client("s3", endpoint_url=endpoint_url)

        self.bucket = bucket
        self.prefix = prefix.strip("/")
        self.client = client

    def key_for(self, file_path, output_root):
        path = Path(file_path)
        try:
            relative_path = path.resolve().relative_to(Path(output_root).resolve())
        except ValueError:
            raise ValueError(f"File outside output directory: {path}") from None
        return "/".join(part for part in (self.prefix, relative_path.as_posix()) if part)

    def upload(self, file_path, output_root):
        """Upload one file; a failure is logged and reported as False."""
        key = self.key_for(file_path, output_root)
        try:
            self.client.upload_file(str(file_path), self.bucket, key)
        except Exception:
            LOGGER.exception(
                "S3 upload failed; local file kept",
                extra={"event": "s3_upload_failed", "file_path": str(file_path), "s3_key": key},
            )
            return False

        LOGGER.info(
            "S3 upload completed",
            extra={"event": "s3_upload_completed", "file_path": str(file_path), "s3_key": key},
        )
        return True

    def upload_directory(self, output_root):
        """Upload every regular file under ``output_root``; returns (uploaded, failed)."""
        uploaded = failed = 0
        for path in sorted(Path(output_root).rglob("*")):
            if not path.is_file() or path.name.startswith("."):
                continue
            if self.upload(path, output_root):
                uploaded += 1
            else:
                failed += 1
        return uploaded, failed
