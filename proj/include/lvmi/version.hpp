#pragma once

namespace lvmi {

/** Version stamp printed in report headers (kept stable for fixture diffs). */
inline constexpr const char* version_string = "lvm-infer 1.0.0";

}  // namespace lvmi
