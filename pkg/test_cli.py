#!/usr/bin/env python3
"""
End-to-end tests of the command line: simulate -> select-q -> fit -> report
"""

import json

import numpy as np
import pandas as pd
import pytest

from cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

TINY = ['--N', '6', '--K', '2', '--V', '10', '--Q', '2', '--seed', '3']
FIT = ['--Q', '2', '--iters', '8', '--burn', '3', '--chains', '2', '--seed', '1']


@pytest.fixture(scope='module')
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('sim')
    assert main(['simulate', *TINY, '--out', str(out), '--force']) == EXIT_OK
    return out


@pytest.fixture(scope='module')
def run_dir(tmp_path_factory, sim_dir):
    out = tmp_path_factory.mktemp('run')
    assert main(['fit', '--data', str(sim_dir), *FIT, '--out', str(out), '--force']) == EXIT_OK
    return out


def test_simulate_writes_dataset_truth_and_manifest(sim_dir):
    assert (sim_dir / 'subjects.csv').exists()
    assert len(list((sim_dir / 'connectomes').glob('*.csv'))) == 12
    truth = json.loads((sim_dir / 'truth.json').read_text())
    assert truth['kind'] == 'truth' and truth['schema_version'] == '1.0'
    manifest = json.loads((sim_dir / 'manifest.json').read_text())
    assert manifest['command'] == 'simulate'
    assert manifest['seeds'] == [3]


def test_simulate_refuses_to_overwrite(sim_dir):
    assert main(['simulate', *TINY, '--out', str(sim_dir)]) == EXIT_USAGE


def test_select_q_single_candidate(tmp_path, sim_dir):
    out = tmp_path / 'icl'
    assert main(['select-q', '--data', str(sim_dir), '--q-range', '2:2', '--restarts', '2',
                 '--out', str(out)]) == EXIT_OK
    table = pd.read_csv(out / 'icl.csv')
    assert table['Q'].tolist() == [2]
    assert json.loads((out / 'select_q.json').read_text())['best_Q'] == 2


def test_select_q_bad_range(tmp_path, sim_dir):
    assert main(['select-q', '--data', str(sim_dir), '--q-range', 'two', '--out', str(tmp_path / 'x')]) == EXIT_USAGE


def test_fit_is_reproducible(tmp_path, sim_dir, run_dir):
    out = tmp_path / 'again'
    assert main(['fit', '--data', str(sim_dir), *FIT, '--out', str(out)]) == EXIT_OK
    assert (out / 'draws.csv').read_bytes() == (run_dir / 'draws.csv').read_bytes()
    meta = json.loads((out / 'draws.json').read_text())
    assert meta['seeds'] == [1, 2] and meta['n_chains'] == 2


def test_fit_refuses_existing_draws(sim_dir, run_dir):
    assert main(['fit', '--data', str(sim_dir), *FIT, '--out', str(run_dir)]) == EXIT_USAGE


def test_fit_missing_data_is_a_data_error(tmp_path):
    assert main(['fit', '--data', str(tmp_path / 'nowhere'), *FIT, '--out', str(tmp_path / 'o')]) == EXIT_DATA


def test_fit_needs_block_count(tmp_path, sim_dir):
    assert main(['fit', '--data', str(sim_dir), '--iters', '4', '--burn', '1',
                 '--out', str(tmp_path / 'o')]) == EXIT_USAGE


def test_fit_selects_block_count_by_icl(tmp_path, sim_dir):
    out = tmp_path / 'auto'
    assert main(['fit', '--data', str(sim_dir), '--q-range', '1:2', '--iters', '4', '--burn', '1',
                 '--chains', '1', '--out', str(out)]) == EXIT_OK
    assert json.loads((out / 'draws.json').read_text())['Q'] in (1, 2)


def test_fit_config_file(tmp_path, sim_dir):
    config = tmp_path / 'config.json'
    config.write_text(json.dumps({'chain': {'n_iter': 5, 'burn_in': 2, 'n_chains': 1, 'Q': 2},
                                  'hyper': {'p_tau': 0.3}}))
    out = tmp_path / 'cfg'
    assert main(['fit', '--data', str(sim_dir), '--config', str(config), '--out', str(out)]) == EXIT_OK
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['hyper']['p_tau'] == 0.3
    assert manifest['config']['n_iter'] == 5


def test_fit_config_with_unknown_keys(tmp_path, sim_dir):
    config = tmp_path / 'bad.json'
    config.write_text(json.dumps({'chain': {'iters': 5}}))
    assert main(['fit', '--data', str(sim_dir), '--config', str(config), '--Q', '2',
                 '--out', str(tmp_path / 'o1')]) == EXIT_USAGE
    config.write_text(json.dumps({'sampler': {}}))
    assert main(['fit', '--data', str(sim_dir), '--config', str(config), '--Q', '2',
                 '--out', str(tmp_path / 'o2')]) == EXIT_USAGE


def test_fit_from_truth(tmp_path, sim_dir):
    base = ['fit', '--data', str(sim_dir), '--Q', '2', '--iters', '4', '--burn', '1', '--chains', '1',
            '--init', 'truth']
    assert main(base + ['--out', str(tmp_path / 'a')]) == EXIT_USAGE
    assert main(base + ['--truth', str(sim_dir / 'truth.json'), '--out', str(tmp_path / 'b')]) == EXIT_OK


def test_report_outputs(tmp_path, run_dir):
    out = tmp_path / 'report'
    assert main(['report', '--run', str(run_dir), '--out', str(out), '--excel']) == EXIT_OK
    effects = json.loads((out / 'effects.json').read_text())
    for name in ('nde', 'nie', 'te', 'nie_pos', 'nie_neg'):
        assert set(effects[name]) == {'mean', 'median', 'ci_low', 'ci_high'}
    assert effects['te']['mean'] == pytest.approx(effects['nde']['mean'] + effects['nie']['mean'])
    assert set(effects['inclusion_probs_tau']) == {'1-1', '1-2', '2-2'}
    assert sum(effects['block_sizes'].values()) == 10

    convergence = json.loads((out / 'convergence.json').read_text())
    assert 'beta_z' in convergence['scalars']
    mask = pd.read_csv(out / 'edge_mask.csv', header=None)
    assert mask.shape == (10, 10)
    assert (out / 'trace.csv').read_text().splitlines()[0] == 'chain,iteration,parameter,value'
    assert set(pd.ExcelFile(out / 'report.xlsx').sheet_names) == {
        'Effects', 'PairEffects', 'Inclusion', 'Convergence', 'Blocks'}

    manifest = json.loads((out / 'report_manifest.json').read_text())
    assert manifest['command'] == 'report'
    assert manifest['config']['contrast'] == effects['contrast']
    assert manifest['config']['split'] is False
    assert set(manifest['inputs']) == {str(run_dir / 'draws.csv'), str(run_dir / 'draws.json')}
    assert all(len(digest) > 0 for digest in manifest['inputs'].values())
    assert str(out / 'report.xlsx') in manifest['outputs']
    assert (run_dir / 'manifest.json').exists()


def test_report_with_custom_contrast(tmp_path, run_dir):
    out = tmp_path / 'contrast'
    assert main(['report', '--run', str(run_dir), '--out', str(out), '--contrast', '2', '0']) == EXIT_OK
    effects = json.loads((out / 'effects.json').read_text())
    assert effects['contrast'] == [2.0, 0.0]
    trace = pd.read_csv(out / 'trace.csv')
    assert trace.loc[trace['parameter'] == 'te', 'value'].mean() == pytest.approx(effects['te']['mean'])
    convergence = json.loads((out / 'convergence.json').read_text())
    assert np.mean(convergence['scalars']['nde']['chain_means']) == pytest.approx(effects['nde']['mean'])
    manifest = json.loads((out / 'report_manifest.json').read_text())
    assert manifest['config']['contrast'] == [2.0, 0.0]


def test_report_single_chain_skips_convergence(tmp_path, sim_dir, capsys):
    run = tmp_path / 'one'
    assert main(['fit', '--data', str(sim_dir), '--Q', '2', '--iters', '5', '--burn', '2', '--chains', '1',
                 '--out', str(run)]) == EXIT_OK
    assert main(['report', '--run', str(run)]) == EXIT_OK
    assert not (run / 'convergence.json').exists()
    assert 'Gelman-Rubin needs at least two' in capsys.readouterr().out


def test_report_missing_run(tmp_path):
    assert main(['report', '--run', str(tmp_path / 'missing'), '--out', str(tmp_path / 'r')]) == EXIT_DATA


def test_parser_errors_exit_with_usage_code():
    with pytest.raises(SystemExit) as exc:
        main(['fit'])
    assert exc.value.code == EXIT_USAGE
