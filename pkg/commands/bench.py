import click

from repositories.run_log_repository import RunLogRepository
from services.bench_service import BENCH_CHANNELS, BENCH_REPEATS, BenchService

DEFAULT_CASES = ('shell32', 'sweep', 'empty')


@click.command()
@click.option('--case', 'cases', multiple=True, help='shell<R>, sweep or empty; repeatable')
@click.option('--channels', type=int, default=BENCH_CHANNELS, show_default=True)
@click.option('--repeats', type=int, default=BENCH_REPEATS, show_default=True)
@click.option('--report', 'report_path', type=click.Path(dir_okay=False), default=None)
def bench(cases, channels, repeats, report_path):
    """Time grid build, lookup and sparse convolution against a dense baseline"""
    report = BenchService.run_bench(cases or DEFAULT_CASES, channels=channels, repeats=repeats)
    for case in report.cases:
        click.echo(f"{case.name}: {case.active_voxels} voxels, topology+index "
                   f"{case.topology_bytes + case.index_bytes} B (dense {case.dense_bytes} B), "
                   f"build {case.build_ms:.1f} ms, conv {case.conv_ms:.2f} ms"
                   + (f" (dense {case.dense_conv_ms:.2f} ms)" if case.dense_conv_ms is not None else ""))
    if report.scaling:
        click.echo(f"near-linear scaling: {'yes' if report.near_linear else 'no'}")
    if report_path:
        RunLogRepository.write_report(report_path, report.to_dict())
