#pragma once

#include <stdexcept>
#include <string>

namespace fedbench {

// Base class for all toolkit errors. Every failure mode named in a module
// contract gets its own type so callers (and tests) can catch precisely.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define FEDBENCH_DEFINE_ERROR(Name)                                       \
    class Name : public Error {                                           \
    public:                                                               \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    }

// scenario
FEDBENCH_DEFINE_ERROR(UnknownScenario);
FEDBENCH_DEFINE_ERROR(ChecksumMismatch);
FEDBENCH_DEFINE_ERROR(FetchFailure);
FEDBENCH_DEFINE_ERROR(InvalidSpec);
FEDBENCH_DEFINE_ERROR(NoCommonIds);
FEDBENCH_DEFINE_ERROR(LengthMismatch);
FEDBENCH_DEFINE_ERROR(DegenerateAuc);

// engine
FEDBENCH_DEFINE_ERROR(ShapeMismatch);
FEDBENCH_DEFINE_ERROR(EmptyUpdateSet);
FEDBENCH_DEFINE_ERROR(InvalidK);
FEDBENCH_DEFINE_ERROR(NonFiniteLoss);
FEDBENCH_DEFINE_ERROR(EdgeMismatch);
FEDBENCH_DEFINE_ERROR(AlignmentError);

// transport
FEDBENCH_DEFINE_ERROR(BindFailure);
FEDBENCH_DEFINE_ERROR(ConnectTimeout);
FEDBENCH_DEFINE_ERROR(VersionMismatch);
FEDBENCH_DEFINE_ERROR(PeerClosed);
FEDBENCH_DEFINE_ERROR(FrameTooLarge);
FEDBENCH_DEFINE_ERROR(MalformedHeader);

// eventlog
FEDBENCH_DEFINE_ERROR(IoFailure);
FEDBENCH_DEFINE_ERROR(MalformedLine);

// orchestrator
FEDBENCH_DEFINE_ERROR(ParseError);
FEDBENCH_DEFINE_ERROR(IncompatibleCombination);
FEDBENCH_DEFINE_ERROR(UnknownEngine);
FEDBENCH_DEFINE_ERROR(SpawnFailure);
FEDBENCH_DEFINE_ERROR(HostUnreachable);
FEDBENCH_DEFINE_ERROR(PortConflict);

// analyzer
FEDBENCH_DEFINE_ERROR(CorruptLog);
FEDBENCH_DEFINE_ERROR(MissingAggregatorLog);
FEDBENCH_DEFINE_ERROR(IncomparableScenarios);

// advisor
FEDBENCH_DEFINE_ERROR(SchemaError);
FEDBENCH_DEFINE_ERROR(NoMatch);

#undef FEDBENCH_DEFINE_ERROR

} // namespace fedbench
