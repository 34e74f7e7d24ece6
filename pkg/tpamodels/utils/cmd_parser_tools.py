"""
Contains routines for parsing
the command-line arguments and
the JSON configuration files that
accompany them.

"""

import argparse
import json

from tpamodels.utils.errors import ConfigError

_TRUE_WORDS = ('yes', 'y', 'true', 't', 'on', '1')
_FALSE_WORDS = ('no', 'n', 'false', 'f', 'off', '0')


def str2bool(v):
    """
    Value of a boolean plan key such as `dry_run`, given as a
    command-line word or a JSON string. Booleans pass through;
    yes/no, true/false, on/off and 1/0 are accepted in any case.
    """
    if isinstance(v, bool):
        return v
    key = str(v).strip().lower()
    if key in _TRUE_WORDS:
        return True
    if key in _FALSE_WORDS:
        return False
    raise argparse.ArgumentTypeError(
        f'expected an on/off value such as yes or no, got {v!r}')


def int_list(v):
    """
    Parse a comma-separated list of integers, such as
    '1024,2048'. Entries of the form '2^k' are expanded
    to powers of two.
    """
    values = []
    for item in v.split(','):
        item = item.strip()
        if not item:
            continue
        try:
            if '^' in item:
                base, exp = item.split('^')
                values.append(int(base) ** int(exp))
            else:
                values.append(int(item))
        except ValueError:
            raise argparse.ArgumentTypeError(
                f'Integer list expected, got {v!r}.')
    if not values:
        raise argparse.ArgumentTypeError('Empty integer list.')
    return values


def str_list(v):
    """Parse a comma-separated list of names."""
    return [item.strip() for item in v.split(',') if item.strip()]


def flag_name(key):
    """Convert a config key into its --kebab-case flag."""
    return '--{}'.format(key.replace('_', '-'))


def add_config_arguments(parser, args):
    """
    Add one optional flag per configuration key.

    Parameters
    ----------

    parser: argparse.ArgumentParser

    args: dict
        A dictionary of the form

        {'key': [type_, default_value],}

        For each key a --kebab-case flag is created.
        Defaults are NOT set on the parser (they are None)
        so that merge_overrides() can tell explicit flags
        apart from omitted ones.
    """
    for key, (type_, default) in args.items():
        help_ = None if default is None else f'default: {default}'
        if type_ is bool:
            # bare --flag means True
            parser.add_argument(flag_name(key), dest=key, type=str2bool,
                                nargs='?', const=True, default=None,
                                help=help_)
            continue
        parser.add_argument(flag_name(key), dest=key, type=type_,
                            default=None, help=help_)
    return parser


def load_json_config(path):
    """
    Load a flat JSON configuration object.

    Raises:
    -------
    ConfigError: if the file cannot be read, is not valid
        JSON or does not contain an object.
    """
    try:
        with open(path) as f:
            config = json.load(f)
    except OSError as exc:
        raise ConfigError(f'cannot read {path}: {exc.strerror}') from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f'{path}: line {exc.lineno}: {exc.msg}') from exc
    if not isinstance(config, dict):
        raise ConfigError(f'{path}: expected a JSON object')
    return config


def merge_overrides(defaults, config, namespace):
    """
    Combine defaults, the JSON config and explicit flags,
    in increasing order of priority.

    Parameters
    ----------

    defaults: dict
        {'key': [type_, default_value]}

    config: dict
        Values loaded from the configuration file.

    namespace: argparse.Namespace or dict
        Parsed command-line arguments.

    Returns
    -------

    merged: dict
        One value per key of `defaults`.
    """
    flags = vars(namespace) if not isinstance(namespace, dict) \
        else namespace
    unknown = set(config) - set(defaults)
    if unknown:
        raise ConfigError('unknown configuration keys: {}'.format(
            ', '.join(sorted(unknown))))
    merged = {}
    for key, (type_, default) in defaults.items():
        value = default
        if key in config:
            value = config[key]
        if flags.get(key) is not None:
            value = flags[key]
        convert = type_ in (int, float, str) or isinstance(value, str)
        if value is not None and convert:
            try:
                value = (str2bool if type_ is bool else type_)(value)
            except (TypeError, ValueError,
                    argparse.ArgumentTypeError) as exc:
                raise ConfigError(f'{key}: cannot convert {value!r} '
                                  f'to {type_.__name__}') from exc
        merged[key] = value
    return merged
