import datetime
import json
import os
from typing import Iterable

from sqlalchemy import create_engine, Column, Integer, Float, Text, DateTime
from sqlalchemy.orm import sessionmaker, declarative_base

Base = declarative_base()

DATABASE_URL_ENV_VAR = "LATENT_DEMAND_DB"
DEFAULT_DATABASE_URL = "sqlite:///data/latent_demand.db"


class EvalRun(Base):
    __tablename__ = 'eval_runs'

    id = Column(Integer, primary_key=True, autoincrement=True)
    created_at = Column(DateTime, nullable=False, default=datetime.datetime.now)
    protocol = Column(Text, nullable=False)
    model_kind = Column(Text, nullable=False)
    queue = Column(Text)
    penetration = Column(Float)
    market_share = Column(Float)
    seed = Column(Integer)
    tilted_loss_sum = Column(Float, nullable=False)
    icp = Column(Float, nullable=False)
    mil = Column(Float, nullable=False)
    icp_most_censored = Column(Float)
    crossing_rate = Column(Float)
    tilted_loss_kwh = Column(Float)
    per_node = Column(Text)

    def __repr__(self):
        return (f"<EvalRun(id={self.id}, protocol='{self.protocol}', model_kind='{self.model_kind}', "
                f"tilted_loss_sum={self.tilted_loss_sum:.4f})>")


def database_url(url: str | None = None) -> str:
    return url or os.environ.get(DATABASE_URL_ENV_VAR) or DEFAULT_DATABASE_URL


def ensure_sqlite_dir(url: str) -> None:
    """Create the parent directory of a file-backed SQLite database."""
    if url.startswith("sqlite:///") and not url.startswith("sqlite:///:memory:"):
        os.makedirs(os.path.dirname(url.removeprefix("sqlite:///")) or ".", exist_ok=True)


def session_factory(url: str | None = None):
    """Engine plus session maker for a results database; tables are created if absent."""
    url = database_url(url)
    ensure_sqlite_dir(url)
    engine = create_engine(url)
    Base.metadata.create_all(engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


def get_db(url: str | None = None):
    db = session_factory(url)()
    try:
        yield db
    finally:
        db.close()


def record_reports(reports: Iterable, url: str | None = None) -> int:
    """Store EvalReports, one row each. Returns the number of rows written."""
    count = 0
    for db in get_db(url):
        for report in reports:
            db.add(EvalRun(
                protocol=report.protocol or "single",
                model_kind=report.model_kind,
                queue=report.queue,
                penetration=report.penetration,
                market_share=report.market_share,
                seed=report.seed,
                tilted_loss_sum=report.tilted_loss_sum,
                icp=report.icp,
                mil=report.mil,
                icp_most_censored=report.icp_most_censored,
                crossing_rate=report.crossing_rate,
                tilted_loss_kwh=report.tilted_loss_kwh,
                per_node=json.dumps(report.per_node, sort_keys=True),
            ))
            count += 1
        db.commit()
    return count
