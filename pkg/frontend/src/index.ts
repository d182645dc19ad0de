export {
  BAD_ARGUMENT,
  BAD_HANDLE,
  Bridge,
  BridgeError,
  INTERNAL,
  OK,
  type Response,
} from "./bridge.js";
export {
  buildMlp,
  formatMatrix,
  Session,
  type HostArray,
} from "./api.js";
