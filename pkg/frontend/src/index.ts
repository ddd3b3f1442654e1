export * from "./protocol.js";
export * from "./endpoints.js";
export * from "./bridge.js";
export * from "./corpus.js";
export * from "./server.js";
