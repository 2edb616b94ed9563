import click

from modepinn.run_entrypoint import (
    bench_cmd,
    finetune_cmd,
    pretrain_cmd,
    reference_cmd,
    selftest_cmd,
)


@click.group()
def cli():
    """
    Top level entry-point for CLI.
    """


cli.add_command(pretrain_cmd)
cli.add_command(finetune_cmd)
cli.add_command(reference_cmd)
cli.add_command(bench_cmd)
cli.add_command(selftest_cmd)


def main():
    cli()
