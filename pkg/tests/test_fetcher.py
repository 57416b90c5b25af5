import pytest
import requests

from src import fetcher
from src.fetcher import StructureFetcher

PDB_BYTES = (b"HEADER    TEST\n"
             b"ATOM      1  N   GLY A   1      11.104   6.134  -6.504  1.00  0.00           N\n"
             b"END\n")


class FakeResponse:
    def __init__(self, content=PDB_BYTES, status=200):
        self.content = content
        self.status_code = status

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.exceptions.HTTPError(f"{self.status_code} error")


@pytest.fixture
def calls(monkeypatch):
    seen = []
    monkeypatch.setattr(fetcher.time, 'sleep', lambda seconds: None)

    def install(response=None, error=None):
        def fake_get(url, timeout):
            seen.append(url)
            if error is not None:
                raise error
            return response or FakeResponse()
        monkeypatch.setattr(fetcher.requests, 'get', fake_get)
        return seen
    return install


def test_fetch_success(calls):
    seen = calls()
    data = StructureFetcher(base_url='https://example.org/download/').fetch('1abc')
    assert data == PDB_BYTES
    assert seen == ['https://example.org/download/1ABC.pdb']


@pytest.mark.parametrize('kwargs', [
    {'response': FakeResponse(status=404)},
    {'error': requests.exceptions.Timeout()},
    {'error': requests.exceptions.ConnectionError('refused')},
    {'response': FakeResponse(content=b'<html>not found</html>')},
])
def test_fetch_failures_return_none(calls, kwargs):
    calls(**kwargs)
    assert StructureFetcher().fetch('1abc') is None


def test_fetch_many_writes_and_skips(tmp_path, calls):
    seen = calls()
    (tmp_path / '2xyz.pdb').write_bytes(PDB_BYTES)
    summary = StructureFetcher().fetch_many(['1abc', '2xyz'], str(tmp_path))
    assert summary == {'requested': 2, 'downloaded': 1, 'skipped': 1, 'failed': 0}
    assert (tmp_path / '1abc.pdb').read_bytes() == PDB_BYTES
    assert len(seen) == 1


def test_fetch_many_counts_failures(tmp_path, calls):
    calls(response=FakeResponse(status=500))
    summary = StructureFetcher().fetch_many(['1abc'], str(tmp_path / 'new'))
    assert summary['failed'] == 1
    assert not (tmp_path / 'new' / '1abc.pdb').exists()
