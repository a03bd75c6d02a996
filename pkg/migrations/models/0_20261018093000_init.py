from tortoise import BaseDBAsyncClient


async def upgrade(db: BaseDBAsyncClient) -> str:
    return """
        CREATE TABLE IF NOT EXISTS "sweeppoint" (
    "id" INTEGER PRIMARY KEY AUTOINCREMENT NOT NULL,
    "name" VARCHAR(64) NOT NULL,
    "seed" INT NOT NULL,
    "mode" VARCHAR(16) NOT NULL,
    "levels" VARCHAR(64) NOT NULL,
    "ratios" VARCHAR(255) NOT NULL,
    "config_hash" VARCHAR(64) NOT NULL,
    "status" VARCHAR(16) NOT NULL DEFAULT 'pending',
    "val_loss" REAL,
    "rel_l2" REAL,
    "macs_int8eq" REAL,
    "aux_macs" REAL,
    "steps" INT,
    "metrics_csv" VARCHAR(1024),
    "error" TEXT,
    CONSTRAINT "uid_sweeppoint_name_4c1f0e" UNIQUE ("name", "seed")
);
CREATE TABLE IF NOT EXISTS "aerich" (
    "id" INTEGER PRIMARY KEY AUTOINCREMENT NOT NULL,
    "version" VARCHAR(255) NOT NULL,
    "app" VARCHAR(100) NOT NULL,
    "content" JSON NOT NULL
);"""


async def downgrade(db: BaseDBAsyncClient) -> str:
    return """
        """
