"""
Sensiprint - 模型完整性指纹工具 CLI
"""

import json
import logging
import os

import click
import numpy as np

from sensiprint import __version__, attacks, bench, data, fingerprint, manc, nn, report, samplegen, web
from sensiprint.errors import ExperimentAborted, SensiprintError, VerificationAborted
from sensiprint.fingerprint import OutputSpec
from sensiprint.fixtures import RECIPES, build_fixture
from sensiprint.sensitivity import ParamSelector

BREACH_EXIT_CODE = 2
USAGE_EXIT_CODE = 1


class _SpecType(click.ParamType):
    """输出规格标签: top-1, top-3-p-dec-2, p-dec-2"""
    name = 'spec'

    def convert(self, value, param, ctx):
        if isinstance(value, OutputSpec):
            return value
        try:
            return OutputSpec.parse(value)
        except SensiprintError as e:
            self.fail(str(e), param, ctx)


SPEC = _SpecType()


def _fail(e: Exception):
    raise click.ClickException(str(e))


class _Cli(click.Group):
    """命令组: 参数错误按普通失败退出 (1), 退出码 2 只留给检测到篡改"""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = USAGE_EXIT_CODE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = USAGE_EXIT_CODE
            raise


@click.group(cls=_Cli)
@click.option('--verbose', '-v', is_flag=True, help='输出运行日志')
def cli(verbose):
    """Sensiprint - 基于 Sensitive-Samples 的模型完整性验证"""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')


# ============ 模型与攻击 ============

@cli.command()
@click.argument('fixture', type=click.Choice(sorted(RECIPES)))
@click.option('--seed', type=int, default=0, help='随机种子')
@click.option('--out', '-o', type=click.Path(), default='model.bin', help='模型输出路径')
@click.option('--data-dir', type=click.Path(), default=None, help='同时写出 train.set / held_out.set')
def train(fixture, seed, out, data_dir):
    """训练固定实验模型

    示例: sensiprint train mlp --seed 0 -o mlp.bin --data-dir data/mlp
    """
    try:
        fx = build_fixture(fixture, seed)
        digest = nn.save_model(fx.model, out)
        if data_dir:
            os.makedirs(data_dir, exist_ok=True)
            data.save_set(fx.train, os.path.join(data_dir, 'train.set'))
            data.save_set(fx.held_out, os.path.join(data_dir, 'held_out.set'))
    except (SensiprintError, OSError) as e:
        _fail(e)

    summary = fx.summary()
    click.echo(f"模型: {out}")
    click.echo(f"摘要: {digest.hex}")
    click.echo(f"参数量: {summary['params']}")
    click.echo(f"训练准确率: {summary['train_accuracy'] * 100:.1f}%")
    click.echo(f"留出准确率: {summary['held_out_accuracy'] * 100:.1f}%")


def _read_attack(text: str) -> dict:
    if os.path.exists(text):
        with open(text, encoding='utf-8') as f:
            return json.load(f)
    return json.loads(text)


@cli.command()
@click.argument('model_path', type=click.Path(exists=True))
@click.argument('attack')
@click.option('--train', 'train_path', type=click.Path(exists=True), help='训练集 (木马/投毒需要)')
@click.option('--test', 'test_path', type=click.Path(exists=True), help='留出集, 用于准确率指标')
@click.option('--out', '-o', type=click.Path(), default='tampered.bin', help='被篡改模型输出路径')
def attack(model_path, attack, train_path, test_path, out):
    """对模型施加攻击 (ATTACK 为 JSON 文本或 JSON 文件)

    示例: sensiprint attack mlp.bin '{"kind": "quantize", "bits": 8}'
    """
    try:
        cfg = attacks.attack_from_dict(_read_attack(attack))
        model = nn.load_model(model_path)
        train_set = data.load_set(train_path) if train_path else None
        test_set = data.load_set(test_path) if test_path else None
        outcome = attacks.apply_attack(model, cfg, train_set, test_set)
        digest = nn.save_model(outcome.tampered, out)
    except json.JSONDecodeError as e:
        _fail(f"attack config is not valid JSON: {e}")
    except (SensiprintError, OSError) as e:
        _fail(e)

    click.echo(f"攻击: {cfg.attack_id}")
    click.echo(f"被篡改模型: {out} ({digest.hex})")
    for key, value in sorted(outcome.metrics.items()):
        click.echo(f"  {key}: {value:.4f}" if isinstance(value, float) else f"  {key}: {value}")


# ============ 样本生成与选择 ============

@cli.command()
@click.argument('model_path', type=click.Path(exists=True))
@click.argument('pool_path', type=click.Path(exists=True))
@click.option('--n', '-n', type=int, default=100, help='样本数')
@click.option('--lr', type=float, default=1e-3)
@click.option('--itr-max', type=int, default=1000)
@click.option('--epsilon', type=float, default=0.1, help='相似度约束')
@click.option('--seed', type=int, default=0)
@click.option('--workers', type=int, default=1)
@click.option('--out', '-o', type=click.Path(), default='bag.bin')
def gen(model_path, pool_path, n, lr, itr_max, epsilon, seed, workers, out):
    """生成 Sensitive-Sample 样本袋 (原点取自 POOL 数据集)"""
    try:
        model = nn.load_model(model_path)
        pool = data.load_set(pool_path)
        cfg = samplegen.GenConfig(lr=lr, itr_max=itr_max, epsilon=epsilon, seed=seed)
        bag = samplegen.generate_bag(model, ParamSelector(), pool, n, cfg, workers)
        samplegen.save_bag(bag, out, {'gen': cfg.to_dict(), 'model': nn.digest(model).hex})
    except (SensiprintError, OSError) as e:
        _fail(e)

    s0 = np.mean([b.s_initial for b in bag])
    s1 = np.mean([b.s_final for b in bag])
    click.echo(f"样本袋: {out} ({len(bag)} 个样本)")
    click.echo(f"平均灵敏度: {s0:.4g} → {s1:.4g}")
    click.echo(f"平均 SNR: {np.mean([min(b.snr_db, 999.0) for b in bag]):.1f} dB")


@cli.command()
@click.argument('model_path', type=click.Path(exists=True))
@click.argument('bag_path', type=click.Path(exists=True))
@click.option('--method', type=click.Choice(['manc', 'random']), default='manc')
@click.option('--k', '-k', type=int, default=10, help='选取数量')
@click.option('--tau', type=float, default=None, help='激活阈值 (默认按激活函数)')
@click.option('--seed', type=int, default=0, help='random 方法的种子')
@click.option('--out', '-o', type=click.Path(), default='selected.bin')
def select(model_path, bag_path, method, k, tau, seed, out):
    """从样本袋中选取指纹样本"""
    try:
        model = nn.load_model(model_path)
        bag = samplegen.load_bag(bag_path)
        patterns = manc.bag_patterns(model, [b.v for b in bag], tau)
        total = patterns[0].neuron_count
        if method == 'manc':
            result = manc.manc_select(patterns, k)
            chosen = result.selected
        else:
            chosen = manc.random_select(len(bag), k, seed)
            covered = frozenset().union(*(patterns[i].active for i in chosen))
            result = manc.CoverResult(tuple(chosen), covered, len(covered) / total if total else 0.0)
        samplegen.save_bag([bag[i] for i in chosen], out, {'selection': method, 'indices': list(chosen)})
    except (SensiprintError, OSError) as e:
        _fail(e)

    click.echo(f"选取: {', '.join(str(i) for i in chosen)}")
    click.echo(f"神经元覆盖: {len(result.anc)}/{total} ({result.coverage_fraction * 100:.1f}%)")
    click.echo(f"已保存: {out}")


# ============ 指纹与验证 ============

@cli.command('fingerprint')
@click.argument('model_path', type=click.Path(exists=True))
@click.argument('bag_path', type=click.Path(exists=True))
@click.option('--spec', type=SPEC, default='top-1', help='输出规格, 例如 top-1 / top-3-p-dec-2 / p-dec-2')
@click.option('--max-entries', type=int, default=fingerprint.DEFAULT_MAX_ENTRIES)
@click.option('--out', '-o', type=click.Path(), default='model.fp')
def fingerprint_cmd(model_path, bag_path, spec, max_entries, out):
    """构建并保存模型指纹"""
    try:
        model = nn.load_model(model_path)
        bag = samplegen.load_bag(bag_path)
        fp = fingerprint.build_fingerprint(model, bag, spec, {'bag': os.path.basename(bag_path)}, max_entries)
        fingerprint.save_fingerprint(fp, out)
    except (SensiprintError, OSError) as e:
        _fail(e)
    click.echo(f"指纹: {out} ({len(fp)} 条, 规格 {spec.label})")
    click.echo(f"参考模型摘要: {fp.reference_digest.hex}")


@cli.command('verify')
@click.argument('fp_path', type=click.Path(exists=True))
@click.option('--model', 'model_path', type=click.Path(exists=True), help='本地模型文件')
@click.option('--endpoint', help='预测服务地址, 例如 http://127.0.0.1:8000')
@click.option('--timeout', type=float, default=web.DEFAULT_TIMEOUT)
@click.option('--early-exit', is_flag=True, help='发现不一致即停止')
@click.option('--json', 'as_json', is_flag=True, help='以 JSON 输出报告')
@click.pass_context
def verify_cmd(ctx, fp_path, model_path, endpoint, timeout, early_exit, as_json):
    """验证模型完整性: 完好返回 0, 检测到篡改返回 2"""
    if bool(model_path) == bool(endpoint):
        raise click.ClickException("give exactly one of --model or --endpoint")
    try:
        fp = fingerprint.load_fingerprint(fp_path)
        if model_path:
            oracle = fingerprint.local_oracle(nn.load_model(model_path), fp.spec)
        else:
            oracle = web.remote_oracle(endpoint, fp.spec, timeout)
        result = fingerprint.verify(fp, oracle, early_exit=early_exit)
    except VerificationAborted as e:
        _fail(f"verification aborted, integrity undetermined: {e}")
    except (SensiprintError, OSError) as e:
        _fail(e)

    if as_json:
        click.echo(json.dumps(result.to_dict(), ensure_ascii=False))
    else:
        click.echo(f"查询次数: {result.queries_used}")
        if result.detected:
            click.echo(f"检测到篡改: 第 {result.first_mismatch} 条输出不一致")
            if result.shape_mismatch:
                click.echo("输出形状与规格不符")
        else:
            click.echo("模型完好")
    if result.detected:
        ctx.exit(BREACH_EXIT_CODE)


# ============ 服务 ============

@cli.command()
@click.argument('model_path', type=click.Path(exists=True))
@click.option('--spec', type=SPEC, default='top-1')
@click.option('--host', default='127.0.0.1')
@click.option('--port', type=int, default=web.DEFAULT_PORT)
@click.option('--max-request-inputs', type=int, default=16)
@click.option('--log-path', type=click.Path(), default=None, help='请求日志文件')
@click.option('--expose-digest', is_flag=True, help='在 /healthz 中返回模型摘要')
def serve(model_path, spec, host, port, max_request_inputs, log_path, expose_digest):
    """启动黑盒预测服务"""
    try:
        cfg = web.ServeConfig(model_path, spec, host, port, max_request_inputs, log_path, expose_digest)
        handle = web.serve(cfg)
    except SensiprintError as e:
        _fail(e)
    click.echo(f"预测服务: {handle.url} (规格 {spec.label})")
    try:
        handle.wait()
    except KeyboardInterrupt:
        handle.stop()


# ============ 实验与报告 ============

@cli.command('bench')
@click.argument('manifest_path', type=click.Path(exists=True))
@click.option('--out-dir', '-o', type=click.Path(), default='results')
@click.option('--workers', type=int, default=1)
def bench_cmd(manifest_path, out_dir, workers):
    """按 manifest 运行检测率实验"""
    try:
        manifest = bench.load_manifest(manifest_path)
        curve = bench.run_experiment(manifest, workers)
    except ExperimentAborted as e:
        if e.partial is not None:
            report.write_report(e.partial, out_dir, 'partial')
        _fail(e)
    except (SensiprintError, OSError) as e:
        _fail(e)

    paths = report.write_report(curve, out_dir)
    click.echo(report.render_summary(curve))
    for kind, path in paths.items():
        click.echo(f"{kind}: {path}")


@cli.command('report')
@click.argument('curve_path', type=click.Path(exists=True))
@click.option('--out-dir', '-o', type=click.Path(), default=None, help='重新写出 CSV 与绘图 JSON')
def report_cmd(curve_path, out_dir):
    """显示检测率曲线报告"""
    try:
        trials_path = curve_path[:-len('.json')] + '.trials.csv' if curve_path.endswith('.json') else None
        curve = report.load_curve(curve_path, trials_path)
        click.echo(report.render_summary(curve))
        if out_dir:
            for kind, path in report.write_report(curve, out_dir).items():
                click.echo(f"{kind}: {path}")
    except (SensiprintError, OSError) as e:
        _fail(e)


# ============ 版本信息 ============

@cli.command()
def version():
    """显示版本信息"""
    click.echo(f"Sensiprint v{__version__}")
    click.echo("基于 Sensitive-Samples 的模型完整性验证工具")


if __name__ == '__main__':
    cli()
