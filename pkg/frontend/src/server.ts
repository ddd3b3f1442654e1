/** TCP transport: one bridge session per connection, newline-delimited JSON
 * both ways. Requests on a connection are handled strictly in order. */

import { createServer, type Server } from "node:net";

import { BridgeSession, type BridgeConfig, SessionLog } from "./bridge.js";

export interface BridgeServer {
  server: Server;
  port: number;
  log: SessionLog;
  close(): Promise<void>;
}

export function startBridgeServer(
  config: BridgeConfig,
  port = 0,
  host = "127.0.0.1",
): Promise<BridgeServer> {
  const log = new SessionLog();
  const server = createServer((socket) => {
    const session = new BridgeSession(config, log.record);
    let buffer = "";
    let chain: Promise<void> = Promise.resolve();
    socket.on("data", (chunk) => {
      buffer += chunk.toString("utf-8");
      let idx = buffer.indexOf("\n");
      while (idx >= 0) {
        const line = buffer.slice(0, idx);
        buffer = buffer.slice(idx + 1);
        if (line.trim().length > 0) {
          chain = chain.then(async () => {
            const reply = await session.handleLine(line);
            if (!socket.destroyed) socket.write(reply);
          });
        }
        idx = buffer.indexOf("\n");
      }
    });
    socket.on("error", () => {
      socket.destroy();
    });
  });
  return new Promise((resolve, reject) => {
    server.once("error", reject);
    server.listen(port, host, () => {
      const address = server.address();
      const boundPort = typeof address === "object" && address ? address.port : port;
      resolve({
        server,
        port: boundPort,
        log,
        close: () =>
          new Promise<void>((done, fail) =>
            server.close((err) => (err ? fail(err) : done())),
          ),
      });
    });
  });
}
