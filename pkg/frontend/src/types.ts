/* Wire types for the tmalab HTTP+JSON API, plus the label vocabulary
   shared with the backend. Field names follow the server documents
   exactly; do not rename. */

export type NucleusClass = "cancerous" | "benign";
export type Confidence = "certainly" | "probably" | "maybe";
export type StainState = "stained" | "unstained";

export const NUCLEUS_CLASSES: NucleusClass[] = ["cancerous", "benign"];
export const CONFIDENCE_LEVELS: Confidence[] = ["certainly", "probably", "maybe"];

// Annotation circles are color-coded by class, matching the palette the
// backend uses for vector export.
export const CLASS_COLORS: Record<NucleusClass, string> = {
  cancerous: "#000000",
  benign: "#ff0000",
};

/* The classifier prompt offers exactly six buttons: each class at each
   confidence level. */
export type SixOption = { label: NucleusClass; confidence: Confidence };

export const SIX_OPTIONS: SixOption[] = NUCLEUS_CLASSES.flatMap((label) =>
  CONFIDENCE_LEVELS.map((confidence) => ({ label, confidence })),
);

export type SpotInfo = {
  spot_id: string;
  patient_id: string;
  pixel_resolution_um: number;
  width: number;
  height: number;
};

export type SpotListDoc = { spots: SpotInfo[] };

export type AnnotationWire = {
  x: number;
  y: number;
  radius: number;
  class: NucleusClass;
  stained: StainState | null;
  confidence: Confidence;
  expert_id: string;
  session: string;
  timestamp_iso8601: string | null;
};

export type SpotDoc = {
  spot_id: string;
  patient_id: string;
  pixel_resolution_um: number;
  annotations: AnnotationWire[];
};

export type DetectionWire = { x: number; y: number; score: number };

/* The detector has its own label vocabulary (whatever the loaded model
   was trained on); `classes` carries it so correction requests can only
   assert labels the server will accept. */
export type DetectionsDoc = {
  spot_id: string;
  detections: DetectionWire[];
  forest_version: number;
  classes: string[];
};

export type CorrectionRequest = {
  x: number;
  y: number;
  asserted_label: string;
  expert_id: string;
  session: string;
  timestamp?: string;
};

export type CorrectionResponse = {
  spot_id: string;
  patient_id: string;
  predicted_label: string;
  margin_before: number;
  margin_after: number;
  forest_version: number;
};

export function emptySpotDoc(spot: SpotInfo): SpotDoc {
  return {
    spot_id: spot.spot_id,
    patient_id: spot.patient_id,
    pixel_resolution_um: spot.pixel_resolution_um,
    annotations: [],
  };
}
