import os
from pathlib import Path
from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from dotenv import load_dotenv

# pick up DATABASE_URL from .env
load_dotenv()

Base = declarative_base()

engine = None
SessionLocal = None


def get_database_url(output_dir: Optional[str] = None) -> str:
    """Run registry URL: DATABASE_URL if set, else a SQLite file in the output directory."""
    url = os.getenv("DATABASE_URL")
    if url:
        return url
    root = Path(output_dir or os.getenv("HOUSELAB_OUTPUT_DIR", "runs"))
    root.mkdir(parents=True, exist_ok=True)
    return f"sqlite:///{root / 'results.db'}"


def configure_database(url: str):
    """(Re)bind the module-level engine and session factory and create the tables."""
    global engine, SessionLocal
    if engine is not None and str(engine.url) == url:
        return engine
    if engine is not None:
        engine.dispose()
    engine = create_engine(url)
    SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

    # registry tables live in models.py
    import models  # noqa: F401
    Base.metadata.create_all(bind=engine)
    return engine
