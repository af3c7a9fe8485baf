import json

import pytest
from openpyxl import load_workbook

import cli
from conftest import MICRO

MICRO_TOML = """
[backbone]
d = {d}
m = {m}
H = {H}
V = {V}
max_seq = {max_seq}
seed = {seed}

[train]
steps = 3
batch = 4
eval_every = 1
lr = 0.01
""".format(**MICRO)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


@pytest.fixture
def workspace(tmp_path, capsys):
    config = tmp_path / 'micro.toml'
    config.write_text(MICRO_TOML)
    code, _ = run(capsys, 'gen-data', '--config', str(config), '--classes', '3', '--train', '40', '--val', '12',
                  '--out', str(tmp_path / 'synth'))
    assert code == 0
    code, info = run(capsys, 'init-backbone', '--config', str(config), '--out', str(tmp_path / 'backbone.ltw'))
    assert code == 0
    return tmp_path, config, info


class TestUsage:
    def test_help(self, capsys):
        assert cli.main(['--help']) == 0

    @pytest.mark.parametrize('command', sorted(cli.COMMANDS))
    def test_subcommand_help(self, capsys, command):
        assert cli.main([command, '--help']) == 0
        assert '--' in capsys.readouterr().out

    def test_no_command(self, capsys):
        assert cli.main([]) == 1

    def test_unknown_method(self, capsys):
        assert cli.main(['audit', '--method', 'lora']) == 1

    def test_odd_batch(self, tmp_path, capsys):
        assert cli.main(['train', '--batch', '7', '--out', str(tmp_path / 'a.ltw')]) == 1

    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(['audit', '--method', 'prompt', '--config', str(tmp_path / 'none.toml')]) == 1

    @pytest.mark.parametrize('flags', [
        ['--threshold', '0'], ['--threshold', 'nan'], ['--seeds', '0'], ['--seed-list', 'x'], ['--seed-list', '1,two'],
    ])
    def test_bad_compare_flags(self, tmp_path, capsys, flags):
        assert cli.main(['compare', '--methods', 'prompt', *flags, '--out', str(tmp_path / 'cmp')]) == 1


class TestAudit:
    def test_lt_prompt_reference(self, capsys):
        code, report = run(capsys, 'audit', '--method', 'lt-prompt')
        assert code == 0
        assert report['expected'] == report['actual'] == 4224
        assert report['formula'] == 'd*(d+2)'

    def test_all_methods(self, capsys):
        code, reports = run(capsys, 'audit', '--method', 'all')
        assert code == 0
        assert [r['method'] for r in reports] == list(cli.METHODS)
        assert all(r['match'] for r in reports)


class TestGradcheck:
    def test_micro_default(self, capsys):
        code, results = run(capsys, 'gradcheck', '--method', 'lt-prompt')
        assert code == 0
        assert results['lt-prompt']['passed']

    def test_impossible_tolerance_fails(self, capsys):
        code, results = run(capsys, 'gradcheck', '--method', 'prompt', '--tolerance', '0')
        assert code == 3
        assert not results['prompt']['passed']


class TestWorkflow:
    def test_init_backbone_is_deterministic(self, workspace, capsys):
        tmp_path, config, info = workspace
        code, again = run(capsys, 'init-backbone', '--config', str(config), '--out', str(tmp_path / 'copy.ltw'))
        assert code == 0
        assert again['checksum'] == info['checksum']
        assert (tmp_path / 'copy.ltw').read_bytes() == (tmp_path / 'backbone.ltw').read_bytes()

    def test_gen_data_files(self, workspace):
        tmp_path, _, _ = workspace
        for name in ('train.jsonl', 'val.jsonl', 'labels.txt', 'vocab.txt'):
            assert (tmp_path / 'synth' / name).exists()
        assert len((tmp_path / 'synth' / 'labels.txt').read_text().splitlines()) == 3

    def test_train_then_eval(self, workspace, capsys):
        tmp_path, config, info = workspace
        common = ['--method', 'lt-prompt', '--backbone', str(tmp_path / 'backbone.ltw'),
                  '--data', str(tmp_path / 'synth'), '--config', str(config)]
        for run_id in ('1', '2'):
            code, summary = run(capsys, 'train', *common, '--out', str(tmp_path / f"a{run_id}.ltw"),
                                '--metrics', str(tmp_path / f"m{run_id}.csv"))
            assert code == 0
            assert summary['backbone_checksum'] == info['checksum']
            assert summary['steps'] == 3

        assert (tmp_path / 'a1.ltw').read_bytes() == (tmp_path / 'a2.ltw').read_bytes()
        assert (tmp_path / 'm1.csv').read_bytes() == (tmp_path / 'm2.csv').read_bytes()
        lines = (tmp_path / 'm1.csv').read_text().splitlines()
        assert lines[0] == 'step,split,loss,accuracy'
        assert len(lines) == 1 + 3 * 2

        code, result = run(capsys, 'eval', '--backbone', str(tmp_path / 'backbone.ltw'),
                           '--adapter', str(tmp_path / 'a1.ltw'), '--data', str(tmp_path / 'synth'), '--workers', '2')
        assert code == 0
        assert result['n'] == 12
        assert 0.0 <= result['accuracy'] <= 1.0

    def test_init_adapter(self, workspace, capsys):
        tmp_path, config, _ = workspace
        code, info = run(capsys, 'init-adapter', '--method', 'prefix', '--backbone', str(tmp_path / 'backbone.ltw'),
                         '--data', str(tmp_path / 'synth'), '--config', str(config), '--out', str(tmp_path / 'p.ltw'))
        assert code == 0
        assert info['method'] == 'prefix'
        assert (tmp_path / 'p.ltw').exists()

    def test_eval_missing_split(self, workspace, capsys):
        tmp_path, config, _ = workspace
        run(capsys, 'init-adapter', '--method', 'prompt', '--backbone', str(tmp_path / 'backbone.ltw'),
            '--data', str(tmp_path / 'synth'), '--config', str(config), '--out', str(tmp_path / 'p.ltw'))
        code = cli.main(['eval', '--backbone', str(tmp_path / 'backbone.ltw'), '--adapter', str(tmp_path / 'p.ltw'),
                         '--data', str(tmp_path / 'synth'), '--split', 'test'])
        assert code == 2

    def test_missing_data_dir(self, workspace, capsys):
        tmp_path, config, _ = workspace
        code = cli.main(['train', '--method', 'prompt', '--config', str(config), '--data', str(tmp_path / 'nope'),
                         '--out', str(tmp_path / 'a.ltw')])
        assert code == 2

    def test_compare(self, workspace, capsys):
        tmp_path, config, _ = workspace
        code, summary = run(capsys, 'compare', '--methods', 'prompt,lt-prompt', '--seeds', '2', '--steps', '2',
                            '--backbone', str(tmp_path / 'backbone.ltw'), '--data', str(tmp_path / 'synth'),
                            '--config', str(config), '--out', str(tmp_path / 'cmp'))
        assert code == 0
        assert set(summary) == {'prompt', 'lt-prompt'}
        assert set(summary['prompt']) == {'0', '1'}
        curves = (tmp_path / 'cmp' / 'curves.csv').read_text().splitlines()
        assert curves[0] == 'method,seed,step,val_loss'
        assert len(curves) == 1 + 2 * 2 * 2
        assert json.loads((tmp_path / 'cmp' / 'summary.json').read_text()) == summary

    def test_compare_repeated_method(self, workspace, capsys):
        tmp_path, config, _ = workspace
        code, summary = run(capsys, 'compare', '--methods', 'prompt,prompt', '--seed-list', '0,0', '--steps', '2',
                            '--backbone', str(tmp_path / 'backbone.ltw'), '--data', str(tmp_path / 'synth'),
                            '--config', str(config), '--out', str(tmp_path / 'cmp'))
        assert code == 0
        assert summary.keys() == {'prompt'} and summary['prompt'].keys() == {'0'}
        assert len((tmp_path / 'cmp' / 'curves.csv').read_text().splitlines()) == 1 + 2

    def test_benchmark_xlsx(self, workspace, capsys):
        tmp_path, config, _ = workspace
        code, results = run(capsys, 'benchmark', '--steps', '2', '--backbone', str(tmp_path / 'backbone.ltw'),
                            '--data', str(tmp_path / 'synth'), '--config', str(config),
                            '--out', str(tmp_path / 'bench'), '--xlsx')
        assert code == 0
        assert [r['method'] for r in results['methods']] == list(cli.METHODS)
        sheet = load_workbook(tmp_path / 'bench' / 'results.xlsx').active
        header = [c.value for c in next(sheet.iter_rows(max_row=1))]
        assert header[:2] == ['method', 'trainable_params']
        assert sheet.max_row == 1 + len(cli.METHODS)
