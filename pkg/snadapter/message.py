import sys
from colorama import Fore, Style

# When set, only errors are printed (reports are still written)
quiet: bool = False


def set_quiet(value: bool) -> None:
    global quiet
    quiet = value


def error(message: str) -> None:
    print(Style.BRIGHT + Fore.RED + message + Style.RESET_ALL, file=sys.stderr)


def bright(message: str) -> None:
    if quiet:
        return
    print("")
    print(Style.BRIGHT + message + Style.RESET_ALL)


def info(message: str) -> None:
    if not quiet:
        print(message)


def emphasis(text: str) -> str:
    return Fore.BLUE + text + Fore.RESET


def yellow(text: str) -> str:
    return Fore.YELLOW + text + Fore.RESET


def red(text: str) -> str:
    return Fore.RED + text + Fore.RESET


def success(text: str) -> str:
    return Fore.GREEN + text + Fore.RESET


def warning(message: str) -> None:
    if not quiet:
        print(yellow(f"WARNING: {message}"), file=sys.stderr)


def print_parameter(name: str, value, infos: str = None, warning: str = None) -> None:
    if quiet:
        return
    result = f"- {success(name)}: {yellow(str(value))}"

    if infos is not None:
        result += f" ({infos})"
    if warning is not None:
        result += red(f" ({warning})")

    print(result)


def print_metric(name: str, value: float, baseline: float = None) -> None:
    """
    Prints a metric, with its difference to a baseline value when given
    """
    if quiet:
        return
    result = f"- {success(name)}: {yellow(f'{value:.4f}')}"
    if baseline is not None:
        delta = value - baseline
        color = success if delta >= 0 else red
        result += " (" + color(f"{delta:+.4f}") + ")"

    print(result)
