from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from codesign.exceptions import (
    CodesignException,
    InvalidConfigException,
    UnknownCommandException,
)
from codesign.services import COMMANDS, CommandProcessor, load_config, load_gains


console = Console()

USAGE_ERRORS = (InvalidConfigException, UnknownCommandException)

# scalar payload entries worth echoing on the console, per command
HIGHLIGHTS = {
    'analyze': ('gamma', 'estimator_radius', 'regulator_radius'),
    'gamma-bounds': ('k_star', 'gamma_open_loop', 'gamma_star', 'open_loop_sqrt_trace_qstar', 'minimum_sqrt_trace_qstar'),
    'design': ('gamma_bar', 'gamma', 'lambda', 'sqrt_trace_qstar', 'attack_objective', 'residual', 'status'),
    'sweep': ('k_star', 'steps', 'failed'),
    'boundary': ('k', 'directions', 'min_support_gap'),
    'simulate': ('trials', 'inside_fraction', 'max_quadratic_form', 'max_detector_statistic', 'alarms'),
    'check-trivial': ('generic', 'g_rank', 'gk_zero_forces_k_zero', 'every_k_trivial'),
}


class Command(BaseCommand):
    help = 'Reachable-set analysis and security/performance co-design of an estimator/controller loop'

    def add_arguments(self, parser):
        parser.add_argument('action', help=f"One of: {', '.join(COMMANDS)}")
        parser.add_argument('config', help='Path to a JSON run configuration')
        parser.add_argument('--gamma-bar', dest='gamma_bar', type=float, help='Target OCC gain for design')
        parser.add_argument('--from', dest='gamma_from', type=float, help='Lower end of a sweep')
        parser.add_argument('--to', dest='gamma_to', type=float, help='Upper end of a sweep')
        parser.add_argument('--steps', type=int, help='Number of sweep points')
        parser.add_argument('--k', type=int, help='Fixed horizon, overriding the configuration')
        parser.add_argument('--directions', type=int, help='Number of boundary directions')
        parser.add_argument('--trials', type=int, help='Number of simulated trajectories')
        parser.add_argument('--seed', type=int, help='Seed for direction grids and simulations')
        parser.add_argument('--gains', help='JSON file with gains L and K, overriding the configuration')
        parser.add_argument('--output-dir', dest='output_dir', help='Directory for JSON/CSV results')

    def handle(self, *args, **options):
        action = options['action']
        verbose = options['verbosity'] > 0

        if action not in COMMANDS:
            raise CommandError(
                f"Unknown command '{action}' (expected one of: {', '.join(COMMANDS)})", returncode=1
            )

        try:
            config = load_config(options['config'])
            if options.get('gains'):
                config.gains = load_gains(options['gains'], config.model)
            overrides = {
                key: options.get(key)
                for key in ('gamma_bar', 'gamma_from', 'gamma_to', 'steps', 'k', 'directions', 'trials', 'seed')
            }
            envelope = CommandProcessor(config, overrides).dispatch(action)
        except USAGE_ERRORS as e:
            raise CommandError(str(e), returncode=1)
        except CodesignException as e:
            raise CommandError(str(e), returncode=2)

        output_dir = options.get('output_dir') or settings.CODESIGN['OUTPUT_DIR']
        written = envelope.write(output_dir)

        if verbose:
            self.show_result(envelope, written)

    def show_result(self, envelope, written):
        console.print(Panel.fit(
            f"[bold cyan]{envelope.command.upper()}[/bold cyan]\n"
            f"[dim]version {envelope.version}[/dim]",
            border_style="cyan",
            box=box.DOUBLE
        ))

        payload = envelope.to_payload()['payload']
        table = Table(box=box.ROUNDED, show_header=True, header_style="bold magenta")
        table.add_column("Quantity", style="cyan")
        table.add_column("Value", justify="right", style="green")
        for key in HIGHLIGHTS.get(envelope.command, ()):
            if key in payload:
                table.add_row(key, str(payload[key]))
        console.print(table)

        for warning in envelope.warnings:
            console.print(f"[yellow]warning:[/yellow] {warning}")
        for path in written:
            console.print(f"[dim]wrote {path}[/dim]")
