"""create eval_runs

Revision ID: 0001
Revises:
Create Date: 2026-10-17
"""
from alembic import op
import sqlalchemy as sa

revision = "0001"
down_revision = None
branch_labels = None
depends_on = None


def upgrade() -> None:
    op.create_table(
        "eval_runs",
        sa.Column("id", sa.Integer(), primary_key=True, autoincrement=True),
        sa.Column("created_at", sa.DateTime(), nullable=False),
        sa.Column("protocol", sa.Text(), nullable=False),
        sa.Column("model_kind", sa.Text(), nullable=False),
        sa.Column("queue", sa.Text()),
        sa.Column("penetration", sa.Float()),
        sa.Column("market_share", sa.Float()),
        sa.Column("seed", sa.Integer()),
        sa.Column("tilted_loss_sum", sa.Float(), nullable=False),
        sa.Column("icp", sa.Float(), nullable=False),
        sa.Column("mil", sa.Float(), nullable=False),
        sa.Column("icp_most_censored", sa.Float()),
        sa.Column("crossing_rate", sa.Float()),
        sa.Column("tilted_loss_kwh", sa.Float()),
        sa.Column("per_node", sa.Text()),
    )


def downgrade() -> None:
    op.drop_table("eval_runs")
