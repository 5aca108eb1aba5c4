import os
from logging.config import fileConfig

from sqlalchemy import engine_from_config
from sqlalchemy import pool

from alembic import context
from models import DATABASE_URL_ENV_VAR, DEFAULT_DATABASE_URL, Base, ensure_sqlite_dir

config = context.config

# callers that manage logging themselves (the test suite) pass configure_logger=False
if config.config_file_name is not None and config.attributes.get("configure_logger", True):
    fileConfig(config.config_file_name)

target_metadata = Base.metadata


def results_url() -> str:
    """LATENT_DEMAND_DB, then alembic.ini, then the CLI default."""
    return os.environ.get(DATABASE_URL_ENV_VAR) or config.get_main_option("sqlalchemy.url") or DEFAULT_DATABASE_URL


def configure_options(url: str) -> dict:
    # SQLite cannot ALTER most columns in place; batch mode rebuilds the table
    return {
        "target_metadata": target_metadata,
        "compare_type": True,
        "render_as_batch": url.startswith("sqlite"),
    }


def run_migrations_offline() -> None:
    """Emit the migration SQL for the results database without connecting."""
    url = results_url()
    context.configure(url=url, literal_binds=True, dialect_opts={"paramstyle": "named"}, **configure_options(url))

    with context.begin_transaction():
        context.run_migrations()


def run_migrations_online() -> None:
    url = results_url()
    ensure_sqlite_dir(url)
    section = config.get_section(config.config_ini_section, {}) | {"sqlalchemy.url": url}
    connectable = engine_from_config(section, prefix="sqlalchemy.", poolclass=pool.NullPool)

    with connectable.connect() as connection:
        context.configure(connection=connection, **configure_options(url))

        with context.begin_transaction():
            context.run_migrations()


if context.is_offline_mode():
    run_migrations_offline()
else:
    run_migrations_online()
