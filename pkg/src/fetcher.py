"""
Structure file download from the Protein Data Bank.
"""
import logging
import os
import time
from typing import Dict, Iterable, Optional

import requests

from src.config import API_TIMEOUT, PDB_DOWNLOAD_URL

logger = logging.getLogger(__name__)


class StructureFetcher:
    """Downloads PDB-format files one id at a time."""

    def __init__(self, base_url: str = PDB_DOWNLOAD_URL, timeout: int = API_TIMEOUT):
        self.base_url = base_url.rstrip('/')
        self.timeout = timeout
        self._last_fetch_time = None
        self._min_fetch_interval = 1  # Minimum seconds between requests

    def fetch(self, pdb_id: str) -> Optional[bytes]:
        """
        Fetch one structure file.

        Args:
            pdb_id: Four-character PDB identifier

        Returns:
            Raw PDB bytes or None if the download fails or is not a structure
        """
        # Rate limiting
        if self._last_fetch_time:
            elapsed = time.time() - self._last_fetch_time
            if elapsed < self._min_fetch_interval:
                time.sleep(self._min_fetch_interval - elapsed)

        url = f"{self.base_url}/{pdb_id.upper()}.pdb"
        try:
            response = requests.get(url, timeout=self.timeout)
            self._last_fetch_time = time.time()
            response.raise_for_status()
            data = response.content

            if not self._validate_payload(data):
                logger.error(f"Response for {pdb_id} has no ATOM records")
                return None

            logger.info(f"Fetched {pdb_id} ({len(data)} bytes)")
            return data

        except requests.exceptions.Timeout:
            logger.error(f"Timeout fetching {url}")
        except requests.exceptions.RequestException as e:
            logger.error(f"Error fetching {pdb_id}: {e}")

        return None

    def _validate_payload(self, data: bytes) -> bool:
        """A structure file must contain at least one ATOM record."""
        return any(line.startswith(b'ATOM  ') for line in data.splitlines())

    def fetch_many(self, pdb_ids: Iterable[str], out_dir: str) -> Dict:
        """
        Download several structures into out_dir as <id>.pdb.

        Args:
            pdb_ids: Identifiers to fetch
            out_dir: Target directory (created if missing)

        Returns:
            Dictionary with requested/downloaded/skipped/failed counts
        """
        os.makedirs(out_dir, exist_ok=True)
        summary = {'requested': 0, 'downloaded': 0, 'skipped': 0, 'failed': 0}
        for pdb_id in pdb_ids:
            summary['requested'] += 1
            path = os.path.join(out_dir, f"{pdb_id}.pdb")
            if os.path.exists(path):
                logger.debug(f"{path} already present, skipping")
                summary['skipped'] += 1
                continue
            data = self.fetch(pdb_id)
            if data is None:
                summary['failed'] += 1
                continue
            with open(path, 'wb') as f:
                f.write(data)
            summary['downloaded'] += 1

        logger.info(f"Downloaded {summary['downloaded']}/{summary['requested']} structures "
                    f"({summary['skipped']} already present, {summary['failed']} failed)")
        return summary
