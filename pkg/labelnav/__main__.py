from labelnav.cli import cli

cli()
