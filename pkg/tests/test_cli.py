import io
import os

import pytest

from src.cli import run

TINY_SETTINGS = ['--set', 'k_nn=4', '--set', 'n_rbf=4', '--set', 'hidden_dim=8',
                 '--set', 'n_layers=2', '--set', 'code_length=16', '--set', 'n_negatives=2',
                 '--set', 'accumulation=2', '--set', 'max_steps=3', '--set', 'log_every=1']


def posh(*argv):
    """Run one subcommand without a log file; returns (exit code, stdout lines)."""
    out = io.StringIO()
    code = run(list(argv) + ['--log-file', ''], out=out)
    return code, out.getvalue().splitlines()


@pytest.fixture(scope='module')
def workflow(tmp_path_factory):
    """synth -> ingest -> featurize -> train -> encode -> index, sharing one directory."""
    root = tmp_path_factory.mktemp('workflow')
    paths = {name: str(root / name) for name in
             ('data', 'chains.bin', 'graphs.bin', 'model.ckpt', 'metrics.tsv', 'codes.tsv',
              'index.bin')}
    outputs = {}
    steps = [
        ('synth', ['synth', '-o', paths['data'], '--families', '3', '--members', '3',
                   '--min-length', '20', '--max-length', '24', '--sigma', '0.3', '--seed', '1']),
        ('ingest', ['ingest', paths['data'], '-o', paths['chains.bin']]),
        ('featurize', ['featurize', paths['chains.bin'], '-o', paths['graphs.bin']] + TINY_SETTINGS),
        ('train', ['train', paths['graphs.bin'], os.path.join(paths['data'], 'similarity.tsv'),
                   '-o', paths['model.ckpt'], '--metrics', paths['metrics.tsv'],
                   '--no-progress'] + TINY_SETTINGS),
        ('encode', ['encode', paths['model.ckpt'], paths['graphs.bin'], '-o', paths['codes.tsv']]),
        ('index', ['index', paths['codes.tsv'], '-o', paths['index.bin']]),
    ]
    for name, argv in steps:
        code, lines = posh(*argv)
        assert code == 0, f"{name} failed"
        outputs[name] = lines
    paths['similarity'] = os.path.join(paths['data'], 'similarity.tsv')
    return paths, outputs


def test_synth_and_ingest_output(workflow):
    paths, outputs = workflow
    assert len(outputs['synth']) == 9
    assert outputs['synth'][0].split('\t')[:2] == ['fam000_m00', '0']
    assert os.path.exists(os.path.join(paths['data'], 'chains.bin'))
    assert [line.split('\t')[0] for line in outputs['ingest']] == \
        [line.split('\t')[0] for line in outputs['synth']]


def test_featurize_output(workflow):
    _, outputs = workflow
    for line in outputs['featurize']:
        name, n_residues, n_edges = line.split('\t')
        assert int(n_edges) == 4 * int(n_residues)


def test_train_output(workflow):
    paths, outputs = workflow
    assert outputs['train'][0] == 'step\tl_sim\tl_hash\tloss'
    assert len(outputs['train']) == 4
    with open(paths['metrics.tsv']) as f:
        assert len(f.read().splitlines()) == 4


def test_encode_and_index_output(workflow):
    paths, outputs = workflow
    assert len(outputs['encode']) == 9
    with open(paths['codes.tsv']) as f:
        first = f.readline().rstrip('\n').split('\t')
    assert first[0] == 'fam000_m00' and first[2] == '16'
    assert outputs['index'][0].split('\t')[:2] == ['9', '16']


def test_search_with_codes_file(workflow):
    paths, _ = workflow
    code, lines = posh('search', paths['index.bin'], '--query', paths['codes.tsv'], '-k', '3')
    assert code == 0
    assert len(lines) == 27
    query, rank, hit = lines[0].split('\t')[:3]
    assert (query, rank) == ('fam000_m00', '1')


def test_search_with_structure_query(workflow):
    paths, _ = workflow
    pdb = os.path.join(paths['data'], 'fam000_m00.pdb')
    code, lines = posh('search', paths['index.bin'], '--query', pdb, '--model', paths['model.ckpt'],
                       '-k', '2')
    assert code == 0
    rank, hit, hamming = lines[0].split('\t')[:3]
    assert (rank, hit, hamming) == ('1', 'fam000_m00', '0')
    assert posh('search', paths['index.bin'], '--query', pdb)[0] == 2


def test_eval_report(workflow, tmp_path):
    paths, _ = workflow
    report = str(tmp_path / 'eval.tsv')
    code, lines = posh('eval', paths['index.bin'], paths['codes.tsv'], paths['similarity'],
                       '-o', report)
    assert code == 0
    assert lines[0].startswith('query\tauroc')
    assert len(lines) == 11
    assert lines[-1].startswith('MEAN\t')
    assert lines[-1].endswith('skipped=0')
    with open(report) as f:
        assert f.read().splitlines() == lines


def test_tmscore_modes(workflow, tmp_path):
    paths, _ = workflow
    code, lines = posh('tmscore', paths['chains.bin'], '--pairs')
    assert code == 0
    assert len(lines) == 36
    pair_file = tmp_path / 'pairs.txt'
    pair_file.write_text('fam000_m00 fam000_m01\n')
    code, lines = posh('tmscore', paths['chains.bin'], '--pairs', str(pair_file))
    assert code == 0
    assert lines[0].split('\t')[:2] == ['fam000_m00', 'fam000_m01']
    code, lines = posh('tmscore', paths['chains.bin'], '--fragments')
    assert code == 0 and len(lines) == 9


def test_benchmark_memory_table():
    code, lines = posh('benchmark', '--sizes', '1000000', '--memory')
    assert code == 0
    assert lines[1].split('\t') == ['1000000', '400', '50000000', '1600000000', '32.0']


def test_benchmark_timings():
    code, lines = posh('benchmark', '--sizes', '100,200', '-d', '32', '--repeats', '1', '--real')
    assert code == 0
    assert [line.split('\t')[0] for line in lines] == ['method', 'hamming', 'hamming', 'real', 'real']


@pytest.mark.parametrize('argv', [
    [],
    ['frobnicate'],
    ['index'],
    ['benchmark', '--sizes', 'many'],
    ['benchmark', '--threads', '0'],
])
def test_usage_errors(argv):
    assert posh(*argv)[0] == 2


def test_runtime_errors_exit_one(tmp_path):
    missing = str(tmp_path / 'missing.bin')
    assert posh('featurize', missing, '-o', str(tmp_path / 'g.bin'))[0] == 1
    assert posh('index', missing, '-o', str(tmp_path / 'i.bin'))[0] == 1
    (tmp_path / 'empty').mkdir()
    assert posh('ingest', str(tmp_path / 'empty'), '-o', str(tmp_path / 'c.bin'))[0] == 1
    assert posh('benchmark', '--memory', '--set', 'colour=red')[0] == 1
