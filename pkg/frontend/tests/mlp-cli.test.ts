import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, expect, test } from "vitest";

import { buildMlp, Session } from "../src/index.js";

let session: Session;
let dir: string;

beforeAll(async () => {
  session = await Session.open();
  dir = mkdtempSync(join(tmpdir(), "minigraph-frontend-"));
});

afterAll(async () => {
  await session.close();
});

test("script-built MLP graph file trains through the CLI", async () => {
  const mlp = await buildMlp(session, [16], 3);
  const text = await session.symSave(mlp);
  await session.symFree(mlp);
  expect(await session.handleCount()).toBe(0);

  const graphFile = join(dir, "mlp.graph");
  writeFileSync(graphFile, text);

  const dataFile = join(dir, "blobs.rec");
  execFileSync("python3", [
    "-c",
    "import sys; from minigraph.datasets import pack_blobs;" +
      "pack_blobs(sys.argv[1], 192, classes=3, dim=6, seed=0)",
    dataFile,
  ]);

  const reportFile = join(dir, "report.csv");
  execFileSync("python3", [
    "-m",
    "minigraph.cli",
    "train",
    "--graph",
    graphFile,
    "--data",
    dataFile,
    "--epochs",
    "3",
    "--batch",
    "32",
    "--lr",
    "0.1",
    "--report",
    reportFile,
  ]);

  const lines = readFileSync(reportFile, "utf8").trim().split("\n");
  expect(lines[0]).toMatch(/^epoch,loss,acc/);
  expect(lines.length).toBe(4);
  const first = Number(lines[1].split(",")[1]);
  const last = Number(lines[3].split(",")[1]);
  expect(last).toBeLessThan(first);
});

test("script-built graph matches the trainer's own builder", async () => {
  const mine = await buildMlp(session, [16], 3);
  const text = await session.symSave(mine);
  await session.symFree(mine);

  const native = execFileSync("python3", [
    "-c",
    "from minigraph import symbol; from minigraph.train import mlp;" +
      "print(symbol.save(mlp([16], 3)), end='')",
  ]).toString();
  expect(text).toBe(native);
});
