"""
Pipeline commands: ingest -> predict -> train -> generate -> eval, plus
synth, plot and runs. Each command records one PipelineRun, prints a JSON
summary on stdout and, on failure, a JSON error summary on stderr with
exit code 2 (bad input) or 3 (numerical failure).
"""
import json
import sys
from pathlib import Path

import click
from flask import Blueprint, current_app

from lanechange import db
from lanechange.config import merge_config_file, setting
from lanechange.errors import ConfigError, InsufficientDataError, LaneChangeError, ParseError
from lanechange.models import PipelineRun

bp = Blueprint('pipeline', __name__, cli_group=None)


def _fail(command, error):
    current_app.logger.error('%s failed: %s', command, error.message)
    click.echo(json.dumps(error.to_dict(), sort_keys=True, default=str), err=True)
    sys.exit(error.exit_code)


def _configure(config_path, command):
    if not config_path:
        return
    try:
        merge_config_file(current_app.config, config_path)
    except ConfigError as e:
        _fail(command, e)


def _execute(command, arguments, work, seed=None, output_path=None):
    """Run ``work`` inside a ledger entry and translate errors to exit codes"""
    run = PipelineRun(command=command, seed=seed, status='running',
                      output_path=str(output_path) if output_path else None)
    run.set_arguments(arguments)
    db.session.add(run)
    db.session.commit()
    try:
        summary = work()
    except LaneChangeError as e:
        run.finish('failed', e.to_dict())
        db.session.commit()
        _fail(command, e)
    run.finish('succeeded', summary)
    db.session.commit()
    click.echo(json.dumps(summary, sort_keys=True, default=str))
    return summary


def _write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=str) + '\n')
    return path


def _feature_config():
    from lanechange.features import FeatureConfig
    return FeatureConfig.from_mapping(current_app.config['FEATURES'])


def _optimizer_settings(**overrides):
    from lanechange.trajopt import OptimizerSettings
    return OptimizerSettings.from_mapping(current_app.config['OPTIMIZER'], **overrides)


def _unpredictability(scenario, t_n, predictor, trace_dir=None):
    from lanechange.prediction import load_trace, scenario_unpredictability
    trace = None
    if trace_dir:
        trace = load_trace(Path(trace_dir) / f'{scenario.id}.trace.csv')
    strict = setting(current_app.config, 'PREDICT', 'strict_traces')
    return scenario_unpredictability(scenario, t_n, predictor, trace, strict)


def _scenarios_from(data_dir=None, paths=()):
    from lanechange.scenario import load_scenario, load_scenarios
    scenarios = [load_scenario(path) for path in paths]
    if data_dir:
        scenarios.extend(load_scenarios(data_dir))
    if not scenarios:
        raise InsufficientDataError('No scenarios found', data_dir=data_dir, paths=list(paths))
    return sorted(scenarios, key=lambda scenario: scenario.id)


@bp.cli.command('ingest')
@click.option('--input', 'inputs', multiple=True, required=True, type=click.Path(), help='Trajectory table(s)')
@click.option('--schema', default=None, help='Column mapping: ngsim or generic')
@click.option('--units', default=None, type=click.Choice(['feet', 'meters']))
@click.option('--out-dir', required=True, type=click.Path())
@click.option('--vicinity', default=None, type=float, help='Lane-fit vicinity (m)')
@click.option('--smoothing-window', default=None, type=float, help='Smoothing half-width (s)')
@click.option('--jobs', default=None, type=int)
@click.option('--config', 'config_path', default=None, type=click.Path())
def ingest_command(inputs, schema, units, out_dir, vicinity, smoothing_window, jobs, config_path):
    """Extract lane-change scenarios from trajectory tables."""
    from lanechange.ingest import extract_lane_changes, parse
    from lanechange.scenario import save_scenario
    from lanechange.tasks import run_parallel

    _configure(config_path, 'ingest')
    config = current_app.config
    schema = setting(config, 'INGEST', 'schema', schema)
    units = setting(config, 'INGEST', 'units', units)
    vicinity = setting(config, 'INGEST', 'vicinity', vicinity)
    window = setting(config, 'INGEST', 'smoothing_window', smoothing_window)
    history = setting(config, 'INGEST', 'history')
    jobs = setting(config, 'INGEST', 'jobs', jobs)

    def work():
        def one(path):
            log = []
            tracks = parse(path, schema, units)
            scenarios = extract_lane_changes(tracks, config['DT'], vicinity, window, history, Path(path).stem, log)
            return scenarios, log

        results = run_parallel(one, inputs, jobs)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = []
        written = 0
        for scenarios, log in results:
            for scenario in scenarios:
                save_scenario(scenario, out / f'{scenario.id}.json')
                written += 1
            lines.extend(f'{entry["id"]}\t{entry["status"]}\t{entry["reason"]}' for entry in log)
        (out / 'extraction.log').write_text('\n'.join(lines) + ('\n' if lines else ''))
        current_app.logger.info('Wrote %d scenarios to %s', written, out)
        return {'scenarios': written, 'lane_changes': len(lines), 'out_dir': str(out)}

    _execute('ingest', {'inputs': list(inputs), 'schema': schema, 'units': units, 'vicinity': vicinity,
                        'smoothing_window': window}, work, output_path=out_dir)


@bp.cli.command('predict')
@click.option('--data-dir', required=True, type=click.Path())
@click.option('--out-dir', required=True, type=click.Path())
@click.option('--predictor', default=None, type=click.Choice(['cv', 'ca']))
@click.option('--horizon', default=None, type=int, help='Prediction horizon (steps)')
@click.option('--config', 'config_path', default=None, type=click.Path())
def predict_command(data_dir, out_dir, predictor, horizon, config_path):
    """Write reference prediction traces for every scenario."""
    from lanechange.prediction import build_traces, save_trace

    _configure(config_path, 'predict')
    predictor = setting(current_app.config, 'PREDICT', 'predictor', predictor)
    horizon = setting(current_app.config, 'PREDICT', 'horizon', horizon)

    def work():
        scenarios = _scenarios_from(data_dir)
        for scenario in scenarios:
            save_trace(build_traces(scenario, predictor, horizon), Path(out_dir) / f'{scenario.id}.trace.csv')
        return {'traces': len(scenarios), 'predictor': predictor, 'horizon': horizon}

    _execute('predict', {'data_dir': data_dir, 'predictor': predictor, 'horizon': horizon}, work,
             output_path=out_dir)


@bp.cli.command('train')
@click.option('--data-dir', required=True, type=click.Path())
@click.option('--split-spec', default=None, type=click.Path(), help='JSON split file; hashed split otherwise')
@click.option('--all-train', is_flag=True, help='Train on every scenario instead of the train split')
@click.option('--variant', default=None, type=click.Choice(['baseline', 'unpred']))
@click.option('--sweep-grid', default=None, type=click.Path(), help='TOML hyperparameter grid')
@click.option('--seed', default=None, type=int)
@click.option('--out-model', required=True, type=click.Path())
@click.option('--trace-dir', default=None, type=click.Path(), help='Precomputed prediction traces')
@click.option('--jobs', default=None, type=int)
@click.option('--config', 'config_path', default=None, type=click.Path())
def train_command(data_dir, split_spec, all_train, variant, sweep_grid, seed, out_model, trace_dir, jobs,
                  config_path):
    """Fit reward weights to the training experts."""
    from lanechange.features import ModelArtifact
    from lanechange.ingest import load_split_spec, split
    from lanechange.irl import FitSettings, fit, hyperparameter_sweep, load_grid

    _configure(config_path, 'train')
    config = current_app.config
    variant = setting(config, 'TRAIN', 'variant', variant)
    seed = setting(config, 'TRAIN', 'seed', seed)
    jobs = setting(config, 'TRAIN', 'jobs', jobs)
    t_n = setting(config, 'PREDICT', 't_n')
    predictor = setting(config, 'PREDICT', 'predictor')

    def work():
        scenarios = _scenarios_from(data_dir)
        if not all_train:
            spec = load_split_spec(split_spec) if split_spec else None
            scenarios = list(split(scenarios, spec, seed)['train'])
        if not scenarios:
            raise InsufficientDataError('No training scenarios', data_dir=data_dir)
        z_series = None
        if variant == 'unpred':
            z_series = [_unpredictability(scenario, t_n, predictor, trace_dir) for scenario in scenarios]
        cfg = _feature_config()
        settings = FitSettings.from_mapping(config['IRL'])
        if sweep_grid:
            cfg, fitted, _ = hyperparameter_sweep(scenarios, variant, load_grid(sweep_grid), cfg, settings,
                                                  _optimizer_settings(), z_series, jobs, seed)
        else:
            fitted = fit(scenarios, variant, cfg, settings, z_series=z_series, jobs=jobs, seed=seed)
        artifact = ModelArtifact(variant, fitted.theta, cfg, fitted.normalization, t_n, predictor,
                                 {'seed': seed, 'n_train': len(scenarios)})
        path = artifact.save(out_model)
        _write_json(Path(out_model).with_suffix('.report.json'), fitted.report)
        return {'model': str(path), 'variant': variant, 'theta': fitted.theta.as_dict(),
                'converged': fitted.report['converged'], 'n_train': len(scenarios)}

    _execute('train', {'data_dir': data_dir, 'split_spec': split_spec, 'variant': variant,
                       'sweep_grid': sweep_grid, 'all_train': all_train}, work, seed=seed, output_path=out_model)


@bp.cli.command('generate')
@click.option('--model', 'model_path', required=True, type=click.Path())
@click.option('--scenario', 'scenario_paths', multiple=True, type=click.Path())
@click.option('--data-dir', default=None, type=click.Path())
@click.option('--out-dir', required=True, type=click.Path())
@click.option('--restarts', default=None, type=int)
@click.option('--seed', default=None, type=int)
@click.option('--trace-dir', default=None, type=click.Path())
@click.option('--jobs', default=None, type=int)
@click.option('--config', 'config_path', default=None, type=click.Path())
def generate_command(model_path, scenario_paths, data_dir, out_dir, restarts, seed, trace_dir, jobs, config_path):
    """Generate trajectories that are optimal under a trained reward."""
    from lanechange.features import ModelArtifact
    from lanechange.scenario import save_scenario
    from lanechange.tasks import run_parallel
    from lanechange.trajopt import optimize

    _configure(config_path, 'generate')
    config = current_app.config
    restarts = setting(config, 'GENERATE', 'restarts', restarts)
    seed = setting(config, 'GENERATE', 'seed', seed)
    jobs = setting(config, 'GENERATE', 'jobs', jobs)

    def work():
        if not scenario_paths and not data_dir:
            raise ConfigError('Give --scenario or --data-dir')
        model = ModelArtifact.load(model_path)
        settings = _optimizer_settings(restarts=restarts)
        scenarios = _scenarios_from(data_dir, scenario_paths)

        def one(scenario):
            z = None
            if model.variant == 'unpred':
                z = _unpredictability(scenario, model.t_n, model.predictor, trace_dir)
            result = optimize(scenario, model.theta, model.cfg, model.normalization, settings, z, seed)
            generated = scenario.with_ego(result.trajectory, generated_by=model.variant, reward=result.reward)
            save_scenario(generated, Path(out_dir) / f'{scenario.id}.json')
            _write_json(Path(out_dir) / f'{scenario.id}.report.json', result.report.to_dict())
            return result.report.converged

        converged = run_parallel(one, scenarios, jobs)
        return {'generated': len(scenarios), 'converged': int(sum(converged)), 'out_dir': out_dir}

    _execute('generate', {'model': model_path, 'scenarios': list(scenario_paths), 'data_dir': data_dir,
                          'restarts': restarts}, work, seed=seed, output_path=out_dir)


@bp.cli.command('eval')
@click.option('--expert-dir', required=True, type=click.Path())
@click.option('--gen-dir-a', required=True, type=click.Path(), help='Baseline model trajectories')
@click.option('--gen-dir-b', required=True, type=click.Path(), help='Unpredictability-aware trajectories')
@click.option('--out', required=True, type=click.Path())
@click.option('--config', 'config_path', default=None, type=click.Path())
def eval_command(expert_dir, gen_dir_a, gen_dir_b, out, config_path):
    """Compare two sets of generated trajectories against the experts."""
    from lanechange.evaluation import report, state_bands, write_report

    _configure(config_path, 'eval')

    def work():
        experts = {scenario.id: scenario for scenario in _scenarios_from(expert_dir)}
        generated_a = {scenario.id: scenario for scenario in _scenarios_from(gen_dir_a)}
        generated_b = {scenario.id: scenario for scenario in _scenarios_from(gen_dir_b)}
        table, per_scenario = report(experts, generated_a, generated_b)
        ids = list(per_scenario['id'])
        bands = {
            'expert': state_bands(experts[i].ego for i in ids),
            'a': state_bands(generated_a[i].ego for i in ids),
            'b': state_bands(generated_b[i].ego for i in ids),
        }
        write_report(table, per_scenario, out, bands)
        return {'report': out, 'rows': table.to_dict(orient='records')}

    _execute('eval', {'expert_dir': expert_dir, 'gen_dir_a': gen_dir_a, 'gen_dir_b': gen_dir_b}, work,
             output_path=out)


def _parse_theta(text):
    """JSON file of weights or an inline list like d=1,v=0.5"""
    from lanechange.features import ThetaWeights
    path = Path(text)
    if path.suffix == '.json' and path.exists():
        mapping = json.loads(path.read_text())
    else:
        mapping = {}
        for item in filter(None, text.split(',')):
            name, _, value = item.partition('=')
            try:
                mapping[name.strip()] = float(value)
            except ValueError:
                raise ParseError(f'Invalid weight {item!r}', field='theta_star')
    return ThetaWeights.from_mapping(mapping)


@bp.cli.command('synth')
@click.option('--spec', 'spec_path', default=None, type=click.Path(), help='TOML behavior spec')
@click.option('--theta-star', required=True, help='Weights as d=1,v=1,... or a JSON file')
@click.option('--n', default=None, type=int)
@click.option('--seed', default=None, type=int)
@click.option('--noise', default=None, type=float)
@click.option('--out-dir', required=True, type=click.Path())
@click.option('--fixture-format', default=None, type=click.Choice(['ngsim', 'generic']))
@click.option('--jobs', default=None, type=int)
@click.option('--config', 'config_path', default=None, type=click.Path())
def synth_command(spec_path, theta_star, n, seed, noise, out_dir, fixture_format, jobs, config_path):
    """Generate synthetic scenes, experts and an ingest fixture."""
    from lanechange.features import ModelArtifact, UNPREDICTABILITY_AWARE
    from lanechange.scenario import save_scenario
    from lanechange.synth import (SceneSpec, export_fixture, load_scene_spec, make_expert, make_recording,
                                  make_scene, reference_normalization)
    from lanechange.tasks import run_parallel

    _configure(config_path, 'synth')
    config = current_app.config
    n = setting(config, 'SYNTH', 'n', n)
    seed = setting(config, 'SYNTH', 'seed', seed)
    noise = setting(config, 'SYNTH', 'noise', noise)
    fixture_format = setting(config, 'SYNTH', 'fixture_format', fixture_format)
    jobs = setting(config, 'SYNTH', 'jobs', jobs)
    t_n = setting(config, 'PREDICT', 't_n')
    predictor = setting(config, 'PREDICT', 'predictor')

    def work():
        spec = load_scene_spec(spec_path) if spec_path else SceneSpec(dt=config['DT'], K=config['HORIZON'])
        theta = _parse_theta(theta_star).restricted(UNPREDICTABILITY_AWARE)
        cfg = _feature_config()
        scenes = [make_scene(spec, seed + i) for i in range(int(n))]
        z_series = [_unpredictability(scene, t_n, predictor) for scene in scenes]
        norm = reference_normalization(scenes, cfg, 'unpred', z_series, seed=seed)
        settings = _optimizer_settings()

        def one(index):
            return make_expert(scenes[index], theta, cfg, norm, noise, seed + index, settings, z_series[index])

        out = Path(out_dir)
        for expert in run_parallel(one, range(len(scenes)), jobs):
            save_scenario(expert, out / f'{expert.id}.json')
        ModelArtifact('unpred', theta, cfg, norm, t_n, predictor, {'seed': seed, 'synthetic': True}).save(
            out / 'theta_star.model.json')
        fixture = export_fixture(make_recording(seed=seed), out / f'recording.{fixture_format}.csv', fixture_format)
        return {'scenarios': len(scenes), 'fixture': str(fixture), 'theta_star': theta.as_dict()}

    _execute('synth', {'spec': spec_path, 'theta_star': theta_star, 'n': n, 'noise': noise}, work, seed=seed,
             output_path=out_dir)


@bp.cli.command('plot')
@click.option('--scenario', 'scenario_path', required=True, type=click.Path())
@click.option('--gen', 'generated', multiple=True, help='Generated scenario file, optionally label=path')
@click.option('--time', default=None, type=float, help='Snapshot time (s)')
@click.option('--out', required=True, type=click.Path(), help='SVG output; a CSV time series is written beside it')
@click.option('--config', 'config_path', default=None, type=click.Path())
def plot_command(scenario_path, generated, time, out, config_path):
    """Draw a snapshot of a scenario and export its time series."""
    from lanechange.evaluation import time_series
    from lanechange.scenario import load_scenario
    from lanechange.snapshot import render_snapshot

    _configure(config_path, 'plot')
    time = setting(current_app.config, 'PLOT', 'time', time)

    def work():
        scenario = load_scenario(scenario_path)
        trajectories = {}
        for index, item in enumerate(generated):
            label, _, path = item.rpartition('=')
            trajectories[label or f'gen{index + 1}'] = load_scenario(path).ego
        svg = render_snapshot(scenario, trajectories, time, out)
        csv_path = Path(out).with_suffix('.csv')
        time_series(scenario.ego, trajectories).to_csv(csv_path, index=False, float_format='%.10g')
        return {'svg': str(svg), 'time_series': str(csv_path)}

    _execute('plot', {'scenario': scenario_path, 'generated': list(generated), 'time': time}, work,
             output_path=out)


@bp.cli.command('runs')
@click.option('--limit', default=20, type=int)
def runs_command(limit):
    """List the most recent pipeline runs."""
    runs = PipelineRun.query.order_by(PipelineRun.id.desc()).limit(limit).all()
    for run in runs:
        click.echo(json.dumps(run.to_dict(), sort_keys=True))
