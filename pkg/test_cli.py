"""
Tests for the command-line front end
"""

import os
import sys
import json

import pandas as pd
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from main import ExitCode, main, resolve_seed
from report import read_report


@pytest.fixture(scope='module')
def waveform_dir(tmp_path_factory):
    directory = str(tmp_path_factory.mktemp('data') / 'waveforms')
    assert main(['generate', '--out', directory, '--n', '60', '--length', '16', '--channels', '2',
                 '--seed', '1']) == ExitCode.OK
    return directory


def test_profile_json_matches_reference_estimate(capsys):
    code = main(['profile', '--k', '4', '--c', '0', '--length', '16', '--channels', '3', '--classes', '2',
                 '--json', '--profiler-profile', 'exact-zero'])
    assert code == ExitCode.OK
    estimate = json.loads(capsys.readouterr().out)
    assert estimate == {'ram_bytes': 112, 'flash_bytes': 105, 'mac_count': 372}


def test_profile_rejects_too_deep_template():
    code = main(['profile', '--k', '4', '--c', '5', '--length', '16', '--channels', '3', '--classes', '2'])
    assert code == ExitCode.INVALID_ARCH


def test_unknown_profile_is_a_flag_error():
    with pytest.raises(SystemExit) as exc:
        main(['profile', '--k', '4', '--c', '0', '--length', '16', '--channels', '3', '--classes', '2',
              '--profiler-profile', 'esp32'])
    assert exc.value.code == ExitCode.BAD_FLAGS


def test_zero_budget_search_returns_initial_pair(waveform_dir, tmp_path, capsys):
    out = str(tmp_path / 'run.jsonl')
    code = main(['search', '--data', waveform_dir, '--time-min', '0', '--seed', '7', '--out', out])
    assert code == ExitCode.OK
    report = read_report(out)
    assert report.records == []
    assert (report.K, report.C) == (4, 3)
    assert report.config['search']['limits'] == {'ram_max': 20480, 'flash_max': 65536, 'mac_max': 60000}
    assert report.config['search']['search_time_s'] == 0
    assert report.config['search']['seed'] == 7
    assert "k=4,c=3" in capsys.readouterr().out


def test_short_search_writes_consistent_report(waveform_dir, tmp_path):
    out = str(tmp_path / 'short.jsonl')
    code = main(['search', '--data', waveform_dir, '--time-min', '0.02', '--epochs-per-candidate', '1',
                 '--seed', '3', '--out', out])
    assert code == ExitCode.OK
    report = read_report(out)
    assert report.records
    for record in report.records:
        assert record.feasible or record.accuracy == 0.0
    assert main(['report', out]) == ExitCode.OK


def test_missing_dataset_is_reported():
    assert main(['search', '--data', '/nonexistent/windows', '--time-min', '0']) == ExitCode.BAD_DATASET


def test_negative_budget_is_a_flag_error(waveform_dir):
    assert main(['search', '--data', waveform_dir, '--time-min', '-1']) == ExitCode.BAD_FLAGS


def test_train_then_evaluate_reproduces_accuracy(waveform_dir, tmp_path, capsys):
    params = str(tmp_path / 'model.ttnn')
    code = main(['train', '--data', waveform_dir, '--k', '3', '--c', '1', '--epochs', '5', '--seed', '2',
                 '--out', params])
    assert code == ExitCode.OK
    history = pd.read_csv(str(tmp_path / 'model_history.csv'))
    assert len(history) == 5
    capsys.readouterr()

    code = main(['evaluate', '--data', waveform_dir, '--k', '3', '--c', '1', '--seed', '2',
                 '--params', params])
    assert code == ExitCode.OK
    printed = float(capsys.readouterr().out.strip().split()[-1])
    assert printed == pytest.approx(history['val_accuracy'].max(), abs=1e-6)


def test_evaluate_with_wrong_architecture(waveform_dir, tmp_path):
    params = str(tmp_path / 'small.ttnn')
    assert main(['train', '--data', waveform_dir, '--k', '2', '--c', '0', '--epochs', '1',
                 '--out', params]) == ExitCode.OK
    code = main(['evaluate', '--data', waveform_dir, '--k', '2', '--c', '1', '--params', params])
    assert code == ExitCode.INVALID_ARCH


def test_truncated_report_is_rejected(tmp_path):
    path = tmp_path / 'cut.jsonl'
    path.write_text('{"type": "config", "engine_version": "1.0.0", "config": {}}\n')
    assert main(['report', str(path)]) == ExitCode.BAD_DATASET


def test_seed_falls_back_to_environment(monkeypatch):
    monkeypatch.setenv('TINYTNAS_SEED', '41')
    assert resolve_seed(None) == 41
    assert resolve_seed(3) == 3


def test_zero_epochs_per_candidate_is_a_flag_error(waveform_dir, tmp_path):
    code = main(['search', '--data', waveform_dir, '--time-min', '0', '--epochs-per-candidate', '0',
                 '--out', str(tmp_path / 'never.jsonl')])
    assert code == ExitCode.BAD_FLAGS
    assert not (tmp_path / 'never.jsonl').exists()


def test_negative_seed_is_accepted(waveform_dir, tmp_path):
    out = str(tmp_path / 'negative.jsonl')
    assert main(['search', '--data', waveform_dir, '--time-min', '0', '--seed', '-1', '--out', out]) == ExitCode.OK
    assert read_report(out).config['search']['seed'] == -1


def test_search_writes_default_report(waveform_dir, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(['search', '--data', waveform_dir, '--time-min', '0']) == ExitCode.OK
    report = read_report(str(tmp_path / 'run.jsonl'))
    assert (report.K, report.C) == (4, 3)
