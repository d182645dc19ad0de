import { Bridge } from "./bridge.js";

export interface HostArray {
  shape: number[];
  data: Float32Array;
}

function toBytes(data: Float32Array): Uint8Array {
  // The boundary expects little-endian IEEE-754; Node targets are LE.
  return new Uint8Array(data.buffer, data.byteOffset, data.byteLength);
}

/** Typed wrapper over the flat mg_ surface. Every object is a plain
 * numeric handle owned by the session's registry; free what you create. */
export class Session {
  constructor(readonly bridge: Bridge) {}

  static async open(pythonBin = "python3"): Promise<Session> {
    return new Session(new Bridge(pythonBin));
  }

  async close(): Promise<void> {
    await this.bridge.close();
  }

  // ------------------------------------------------------------- arrays

  async ndCreate(shape: number[], data?: Float32Array): Promise<number> {
    const bytes = data ? toBytes(data) : new Uint8Array(0);
    const out = await this.bridge.invoke("nd_create", [shape, bytes]);
    return out[0] as number;
  }

  async ones(shape: number[]): Promise<number> {
    const n = shape.reduce((a, b) => a * b, 1);
    return this.ndCreate(shape, new Float32Array(n).fill(1));
  }

  async ndToHost(handle: number): Promise<HostArray> {
    const out = await this.bridge.invoke("nd_to_host", [handle]);
    const bytes = out[1] as Uint8Array;
    return {
      shape: out[0] as number[],
      data: new Float32Array(
        bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength),
      ),
    };
  }

  async ndScalarMul(handle: number, scalar: number): Promise<number> {
    const out = await this.bridge.invoke("nd_scalar_mul", [handle, scalar]);
    return out[0] as number;
  }

  async ndFree(handle: number): Promise<void> {
    await this.bridge.invoke("nd_free", [handle]);
  }

  // ------------------------------------------------------------ symbols

  async symVariable(name: string): Promise<number> {
    const out = await this.bridge.invoke("sym_variable", [name]);
    return out[0] as number;
  }

  async symApply(
    op: string,
    attrs: Record<string, unknown>,
    inputs: number[],
    name?: string,
  ): Promise<number> {
    const out = await this.bridge.invoke("sym_apply", [
      op,
      attrs,
      inputs,
      name ?? null,
    ]);
    return out[0] as number;
  }

  async symSave(handle: number): Promise<string> {
    const out = await this.bridge.invoke("sym_save", [handle]);
    return out[0] as string;
  }

  async symLoad(text: string): Promise<number> {
    const out = await this.bridge.invoke("sym_load", [text]);
    return out[0] as number;
  }

  async symFree(handle: number): Promise<void> {
    await this.bridge.invoke("sym_free", [handle]);
  }

  // ---------------------------------------------------------- executors

  async execBind(
    sym: number,
    args: Record<string, number>,
    grads: Record<string, number> = {},
  ): Promise<number> {
    const out = await this.bridge.invoke("exec_bind", [sym, args, grads]);
    return out[0] as number;
  }

  async execForward(handle: number): Promise<void> {
    await this.bridge.invoke("exec_forward", [handle]);
  }

  async execBackward(handle: number): Promise<void> {
    await this.bridge.invoke("exec_backward", [handle]);
  }

  async execOutputs(handle: number): Promise<number[]> {
    const out = await this.bridge.invoke("exec_outputs", [handle]);
    return out[0] as number[];
  }

  async execFree(handle: number): Promise<void> {
    await this.bridge.invoke("exec_free", [handle]);
  }

  // ------------------------------------------------------------- status

  async handleCount(): Promise<number> {
    const out = await this.bridge.invoke("handle_count");
    return out[0] as number;
  }

  async lastErrorMessage(): Promise<string> {
    const out = await this.bridge.invoke("last_error_message");
    return out[0] as string;
  }
}

/** Renders a host array the way the interactive session prints it:
 * nested bracket lists with no spaces, e.g. [[2,2,2],[2,2,2]]. */
export function formatMatrix(host: HostArray): string {
  const { shape, data } = host;
  const render = (dim: number, offset: number, stride: number): string => {
    if (dim === shape.length) {
      const v = data[offset];
      return Number.isInteger(v) ? String(v) : String(v);
    }
    const inner = stride / shape[dim];
    const parts: string[] = [];
    for (let i = 0; i < shape[dim]; i++) {
      parts.push(render(dim + 1, offset + i * inner, inner));
    }
    return "[" + parts.join(",") + "]";
  };
  return render(0, 0, data.length);
}

/** Builds the classic fully-connected relu chain ending in a softmax
 * loss head, returning the graph handle. Layer names match the trainer's
 * own builder so saved files are interchangeable. */
export async function buildMlp(
  session: Session,
  hidden: number[],
  classes: number,
): Promise<number> {
  let net = await session.symVariable("data");
  const owned: number[] = [net];
  for (let i = 0; i < hidden.length; i++) {
    net = await session.symApply(
      "FullyConnected",
      { num_hidden: hidden[i] },
      [net],
      `fc${i + 1}`,
    );
    owned.push(net);
    net = await session.symApply(
      "Activation",
      { act_type: "relu" },
      [net],
      `act${i + 1}`,
    );
    owned.push(net);
  }
  net = await session.symApply(
    "FullyConnected",
    { num_hidden: classes },
    [net],
    "out",
  );
  owned.push(net);
  const head = await session.symApply("SoftmaxOutput", {}, [net], "softmax");
  // Intermediate chain handles are subsumed by the head graph.
  for (const h of owned) {
    await session.symFree(h);
  }
  return head;
}
